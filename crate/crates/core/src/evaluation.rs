//! Prediction error, selection rates, bootstrap stability and the
//! replicated simulation study.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::BaselineSpec;
use crate::data::Dataset;
use crate::error::{IdmError, Result};
use crate::inference::{predict_illness_probability, refit_mle, weibull_truth};
use crate::likelihood::{LikelihoodProblem, Observations};
use crate::model::{CovariateMasks, ModelSpec, ParameterSet, Transition};
use crate::optimizer::{crude_start, fit_inner, fit_null, ConvergenceConfig, PenaltyConfig};
use crate::quadrature::QuadratureRule;
use crate::selection::{select_model, PenaltyGrid};
use crate::simulation::{prepare_exact_dataset, prepare_phm_dataset, simulate_scenario, ScenarioConfig, SimulatedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "reg-ict")]
    RegIct,
    #[serde(rename = "oracle-ict")]
    OracleIct,
    #[serde(rename = "reg-tt")]
    RegTt,
    #[serde(rename = "reg-phm")]
    RegPhm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RegIct, Method::OracleIct, Method::RegTt, Method::RegPhm];

    pub fn label(self) -> &'static str {
        match self {
            Method::RegIct => "reg-ict",
            Method::OracleIct => "oracle-ict",
            Method::RegTt => "reg-tt",
            Method::RegPhm => "reg-phm",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| IdmError::InvalidInput(format!("unknown method `{s}`")))
    }
}

pub fn msep(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(IdmError::InvalidInput(format!(
            "cannot compare {} predictions with {} true values",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionRates {
    /// Absent when the transition has no true covariates.
    pub tpr: Option<f64>,
    /// Absent when every covariate is truly active.
    pub fpr: Option<f64>,
}

pub fn selection_rates(selected: &[usize], truth: &[usize], p: usize) -> SelectionRates {
    let tp = selected.iter().filter(|j| truth.contains(j)).count();
    let fp = selected.len() - tp;
    let n_null = p - truth.len();
    SelectionRates {
        tpr: (!truth.is_empty()).then(|| tp as f64 / truth.len() as f64),
        fpr: (n_null > 0).then(|| fp as f64 / n_null as f64),
    }
}

pub fn selection_metrics(selected: &[Vec<usize>; 3], truth: &[Vec<usize>; 3], p: usize) -> [SelectionRates; 3] {
    [0, 1, 2].map(|t| selection_rates(&selected[t], &truth[t], p))
}

/// Selection counts per method, transition and covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTally {
    pub p: usize,
    pub n_replicates: usize,
    pub rows: Vec<TallyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyRow {
    pub method: String,
    pub transition: Transition,
    pub counts: Vec<usize>,
}

impl SelectionTally {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            n_replicates: 0,
            rows: Vec::new(),
        }
    }

    pub fn add(&mut self, method: &str, active: &[Vec<usize>; 3]) {
        for tr in Transition::ALL {
            let pos = match self.rows.iter().position(|r| r.method == method && r.transition == tr) {
                Some(i) => i,
                None => {
                    self.rows.push(TallyRow {
                        method: method.to_string(),
                        transition: tr,
                        counts: vec![0; self.p],
                    });
                    self.rows.len() - 1
                }
            };
            for &j in &active[tr.index()] {
                self.rows[pos].counts[j] += 1;
            }
        }
    }

    pub fn counts(&self, method: &str, tr: Transition) -> Option<&[usize]> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.transition == tr)
            .map(|r| r.counts.as_slice())
    }
}

/// Selection tally over bootstrap resamples at a fixed penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub tally: SelectionTally,
    pub n_boot: usize,
    pub n_failed: usize,
}

pub fn bootstrap_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

pub fn bootstrap_stability(
    data: &Dataset,
    baseline: &BaselineSpec,
    quad: &QuadratureRule,
    penalty: &PenaltyConfig,
    n_boot: usize,
    seed: u64,
    conv: &ConvergenceConfig,
) -> Result<BootstrapResult> {
    let p = data.n_covariates();
    let results: Vec<Option<[Vec<usize>; 3]>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let rows = bootstrap_indices(data.len(), seed, b);
            fit_resample(&data.select_rows(&rows), baseline, quad, penalty, conv)
                .map_err(|e| log::warn!("bootstrap resample {b} failed: {e}"))
                .ok()
        })
        .collect();
    Ok(tally_boot(p, n_boot, results))
}

/// Bootstrap where the resamples are given explicitly.
pub fn bootstrap_with_indices(
    data: &Dataset,
    baseline: &BaselineSpec,
    quad: &QuadratureRule,
    penalty: &PenaltyConfig,
    resamples: &[Vec<usize>],
    conv: &ConvergenceConfig,
) -> Result<BootstrapResult> {
    let results = resamples
        .par_iter()
        .map(|rows| fit_resample(&data.select_rows(rows), baseline, quad, penalty, conv).ok())
        .collect();
    Ok(tally_boot(data.n_covariates(), resamples.len(), results))
}

fn tally_boot(p: usize, n_boot: usize, results: Vec<Option<[Vec<usize>; 3]>>) -> BootstrapResult {
    let mut tally = SelectionTally::new(p);
    let mut n_failed = 0;
    for r in results {
        match r {
            Some(active) => {
                tally.add("bootstrap", &active);
                tally.n_replicates += 1;
            }
            None => n_failed += 1,
        }
    }
    BootstrapResult { tally, n_boot, n_failed }
}

fn fit_resample(
    data: &Dataset,
    baseline: &BaselineSpec,
    quad: &QuadratureRule,
    penalty: &PenaltyConfig,
    conv: &ConvergenceConfig,
) -> Result<[Vec<usize>; 3]> {
    let prob = LikelihoodProblem::new(Observations::Interval(data), baseline, quad)?;
    let masks = CovariateMasks::all(prob.p, prob.transitions());
    let mut init = crude_start(&prob, &masks);
    init.theta = fit_null(&prob, conv)?.params.theta;
    Ok(fit_inner(&prob, &masks, penalty, conv, &init)?.active_set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    pub methods: Vec<Method>,
    pub n_replicates: usize,
    pub seed: u64,
    pub baseline: BaselineSpec,
    pub quadrature_points: usize,
    pub grid: PenaltyGrid,
    pub conv: ConvergenceConfig,
}

impl StudyConfig {
    /// Desk-scale study: 500 training and 500 test subjects, 20 replicates.
    pub fn desk(scenario: ScenarioConfig, methods: Vec<Method>, seed: u64) -> Self {
        Self {
            scenario: scenario.with_sizes(500, 500),
            methods,
            n_replicates: 20,
            seed,
            baseline: BaselineSpec::simulation_default(),
            quadrature_points: crate::quadrature::DEFAULT_POINTS,
            grid: PenaltyGrid::default(),
            conv: ConvergenceConfig::simulation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub msep: Option<f64>,
    pub rates: [SelectionRates; 3],
    pub active_set: [Vec<usize>; 3],
    pub converged: bool,
    /// Every penalized fit behind this row had a non-decreasing objective.
    pub objective_monotone: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<ReplicateRow>,
    pub tally: SelectionTally,
    pub n_failed: usize,
}

impl StudyReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &ReplicateRow> {
        self.rows.iter().filter(move |r| r.method == method && r.error.is_none())
    }

    pub fn mean_msep(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.rows_for(method).filter_map(|r| r.msep).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Seed of replicate `r` under master seed `seed`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng.next_u64()
}

struct MethodOutcome {
    active: [Vec<usize>; 3],
    spec: ModelSpec,
    params: ParameterSet,
    converged: bool,
    monotone: bool,
}

fn fit_method(method: Method, cfg: &StudyConfig, train: &SimulatedSample, quad: &QuadratureRule) -> Result<MethodOutcome> {
    let exact;
    let phm;
    let obs = match method {
        Method::RegIct | Method::OracleIct => Observations::Interval(&train.data),
        Method::RegTt => {
            exact = prepare_exact_dataset(train)?;
            Observations::Exact(&exact)
        }
        Method::RegPhm => {
            phm = prepare_phm_dataset(&train.data);
            Observations::Phm(&phm)
        }
    };
    let prob = LikelihoodProblem::new(obs, &cfg.baseline, quad)?;
    let names = &train.data.covariates.column_names;
    let (active, init, sel_converged, monotone) = if method == Method::OracleIct {
        let support = CovariateMasks {
            masks: cfg.scenario.true_support(),
        };
        (support, None, true, true)
    } else {
        let sel = select_model(&prob, &cfg.grid, &cfg.conv)?;
        let monotone = sel.bic_table.iter().all(|r| r.monotone);
        let (masks, params) = sel.best_fit.active_params(prob.p);
        (masks, Some(params), sel.best_fit.converged, monotone)
    };
    let refit = refit_mle(&prob, &active, &cfg.conv, init.as_ref(), names)?;
    Ok(MethodOutcome {
        active: active.masks.clone(),
        spec: refit.spec,
        params: refit.params,
        converged: sel_converged && refit.converged,
        monotone,
    })
}

fn run_replicate(cfg: &StudyConfig, r: usize, quad: &QuadratureRule) -> Result<Vec<ReplicateRow>> {
    let seed = replicate_seed(cfg.seed, r);
    let sim = simulate_scenario(&cfg.scenario, seed)?;
    let (true_spec, true_params) = weibull_truth(cfg.scenario.weibull_theta1, cfg.scenario.weibull_theta2, &cfg.scenario.beta_true);
    let test = &sim.test;
    let truth_f01: Vec<f64> = test
        .truth
        .iter()
        .enumerate()
        .map(|(i, t)| predict_illness_probability(&true_params, &true_spec, test.data.covariates.row(i), t.horizon, quad))
        .collect::<Result<_>>()?;
    let support = cfg.scenario.true_support();
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let row = match fit_method(method, cfg, &sim.train, quad).and_then(|out| {
            let pred: Vec<f64> = test
                .truth
                .iter()
                .enumerate()
                .map(|(i, t)| predict_illness_probability(&out.params, &out.spec, test.data.covariates.row(i), t.horizon, quad))
                .collect::<Result<_>>()?;
            Ok((out, msep(&pred, &truth_f01)?))
        }) {
            Ok((out, m)) => ReplicateRow {
                replicate: r,
                seed,
                method,
                msep: Some(m),
                rates: selection_metrics(&out.active, &support, cfg.scenario.p),
                active_set: out.active,
                converged: out.converged,
                objective_monotone: out.monotone,
                error: None,
            },
            Err(e) => {
                log::warn!("replicate {r} method {} failed: {e}", method.label());
                ReplicateRow {
                    replicate: r,
                    seed,
                    method,
                    msep: None,
                    rates: Default::default(),
                    active_set: Default::default(),
                    converged: false,
                    objective_monotone: true,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Simulate, fit every method, refit and score on the test sample, for
/// each replicate. Replicates run in parallel.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.methods.is_empty() || cfg.n_replicates == 0 {
        return Err(IdmError::InvalidInput("a study needs at least one method and one replicate".into()));
    }
    cfg.scenario.validate()?;
    let quad = QuadratureRule::gauss_legendre(cfg.quadrature_points)?;
    let per_rep: Vec<Result<Vec<ReplicateRow>>> = (0..cfg.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r, &quad))
        .collect();
    let mut rows = Vec::new();
    for rep in per_rep {
        rows.extend(rep?);
    }
    let mut tally = SelectionTally::new(cfg.scenario.p);
    tally.n_replicates = cfg.n_replicates;
    for row in rows.iter().filter(|r| r.error.is_none()) {
        tally.add(row.method.label(), &row.active_set);
    }
    let n_failed = rows.iter().filter(|r| r.error.is_some()).count();
    if n_failed * 10 > rows.len() {
        return Err(IdmError::NonConvergence(format!("{n_failed} of {} replicate fits failed", rows.len())));
    }
    Ok(StudyReport { rows, tally, n_failed })
}
