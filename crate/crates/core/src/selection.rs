//! BIC grid search over `(a, lambda01, lambda02, lambda12)` with
//! per-transition pre-selection of the penalty levels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IdmError, Result};
use crate::likelihood::LikelihoodProblem;
use crate::model::{CovariateMasks, ParameterSet, Transition};
use crate::optimizer::{fit_inner, fit_null, ConvergenceConfig, FitResult, PenaltyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyGrid {
    pub a_values: Vec<f64>,
    pub n_lambda: usize,
    pub shortlist: usize,
    /// Smallest lambda as a fraction of the all-zero threshold.
    pub decay: f64,
}

impl Default for PenaltyGrid {
    fn default() -> Self {
        Self {
            a_values: vec![0.25, 0.5, 0.75, 1.0],
            n_lambda: 20,
            shortlist: 3,
            decay: 1e-3,
        }
    }
}

impl PenaltyGrid {
    pub fn validate(&self) -> Result<()> {
        if self.a_values.is_empty() || self.a_values.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(IdmError::InvalidInput("grid.a_values must be non-empty and inside [0, 1]".into()));
        }
        if self.n_lambda == 0 || self.shortlist == 0 || self.shortlist > self.n_lambda {
            return Err(IdmError::InvalidInput("need 1 <= grid.shortlist <= grid.n_lambda".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(IdmError::InvalidInput("grid.decay must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub a: f64,
    pub lambda01: f64,
    pub lambda02: f64,
    pub lambda12: f64,
    pub bic: f64,
    pub n_active: usize,
    pub loglik: f64,
    pub converged: bool,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortlist {
    pub a: f64,
    pub grids: [Vec<f64>; 3],
    pub lambdas: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub best_fit: FitResult,
    pub best_bic: f64,
    pub selected_penalty: PenaltyConfig,
    pub bic_table: Vec<BicRow>,
    pub shortlists: Vec<Shortlist>,
    pub n_preselection_fits: usize,
    pub n_failed: usize,
}

pub fn bic_value(loglik: f64, n: usize, n_active: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * n_active as f64
}

pub fn bic(fit: &FitResult, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(IdmError::InvalidInput(format!("BIC needs at least 2 subjects, got {n}")));
    }
    Ok(bic_value(fit.unpenalized_ll, n, fit.n_active()))
}

/// Gradient of the log-likelihood at `beta = 0` for every covariate, per
/// transition, with the baseline at the covariate-free fit.
pub fn null_gradient(prob: &LikelihoodProblem, null: &FitResult) -> Result<[Vec<f64>; 3]> {
    let masks = CovariateMasks::all(prob.p, prob.transitions());
    let params = ParameterSet {
        theta: null.params.theta.clone(),
        beta: [0, 1, 2].map(|t| vec![0.0; masks.masks[t].len()]),
    };
    let der = prob.beta_derivatives(&params, &masks)?;
    Ok(Transition::ALL.map(|tr| der.gradient[der.block(tr)].to_vec()))
}

/// `n` log-spaced values from `lambda_max` down to `lambda_max * decay`.
pub fn log_spaced(lambda_max: f64, n: usize, decay: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|i| lambda_max * decay.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// The all-zero threshold `max_k |grad_k| / a` (with `a = 0` mapped to
/// 0.25), then a log-spaced descending grid.
pub fn lambda_grid_for_transition(gradient: &[f64], a: f64, grid: &PenaltyGrid) -> Result<Vec<f64>> {
    let a_eff = if a > 0.0 { a } else { 0.25 };
    let gmax = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if !(gmax > 0.0) || !gmax.is_finite() {
        return Err(IdmError::Selection("null gradient is zero; cannot build a penalty grid".into()));
    }
    Ok(log_spaced(gmax / a_eff, grid.n_lambda, grid.decay))
}

struct PathPoint {
    lambda: f64,
    bic: f64,
    fit: FitResult,
}

/// Warm-started path of single-transition fits; returns successful points
/// in grid order.
fn preselection_path(
    prob: &LikelihoodProblem,
    null: &FitResult,
    tr: Transition,
    a: f64,
    lambdas: &[f64],
    conv: &ConvergenceConfig,
) -> Vec<PathPoint> {
    let masks = CovariateMasks::only(prob.p, tr);
    let mut init = ParameterSet {
        theta: null.params.theta.clone(),
        beta: [0, 1, 2].map(|t| vec![0.0; masks.masks[t].len()]),
    };
    let mut out = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let cfg = PenaltyConfig { a, lambda: [lam; 3] };
        match fit_inner(prob, &masks, &cfg, conv, &init) {
            Ok(fit) => {
                init = fit.params.clone();
                out.push(PathPoint {
                    lambda: lam,
                    bic: bic_value(fit.unpenalized_ll, prob.n, fit.n_active()),
                    fit,
                });
            }
            Err(e) => log::warn!("pre-selection fit on {tr} at lambda {lam} failed: {e}"),
        }
    }
    out
}

/// Best `k` points by BIC; ties go to the larger lambda.
fn shortlist_of(path: &[PathPoint], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..path.len()).collect();
    idx.sort_by(|&i, &j| {
        path[i]
            .bic
            .total_cmp(&path[j].bic)
            .then(path[j].lambda.total_cmp(&path[i].lambda))
    });
    idx.truncate(k);
    idx
}

/// Shortlisted lambda values per transition for one mixing weight.
pub fn preselect_lambdas(
    prob: &LikelihoodProblem,
    null: &FitResult,
    gradient: &[Vec<f64>; 3],
    a: f64,
    grid: &PenaltyGrid,
    conv: &ConvergenceConfig,
) -> Result<Shortlist> {
    Ok(preselect_with_fits(prob, null, gradient, a, grid, conv)?.0)
}

type ShortlistFits = [Vec<Vec<f64>>; 3];

fn preselect_with_fits(
    prob: &LikelihoodProblem,
    null: &FitResult,
    gradient: &[Vec<f64>; 3],
    a: f64,
    grid: &PenaltyGrid,
    conv: &ConvergenceConfig,
) -> Result<(Shortlist, ShortlistFits, usize)> {
    let mut grids: [Vec<f64>; 3] = Default::default();
    let mut lambdas: [Vec<f64>; 3] = Default::default();
    let mut betas: ShortlistFits = Default::default();
    let mut n_fits = 0;
    for &tr in prob.transitions() {
        let t = tr.index();
        grids[t] = lambda_grid_for_transition(&gradient[t], a, grid)?;
        let path = preselection_path(prob, null, tr, a, &grids[t], conv);
        n_fits += grids[t].len();
        let keep = shortlist_of(&path, grid.shortlist);
        if keep.is_empty() {
            return Err(IdmError::Selection(format!("every pre-selection fit on {tr} failed")));
        }
        for i in keep {
            lambdas[t].push(path[i].lambda);
            betas[t].push(path[i].fit.params.beta[t].clone());
        }
    }
    Ok((Shortlist { a, grids, lambdas }, betas, n_fits))
}

struct Candidate {
    penalty: PenaltyConfig,
    init: ParameterSet,
}

/// Full grid search. Returns the minimum-BIC fit with ties broken towards
/// larger `lambda01`, then `lambda02`, `lambda12` and `a`.
pub fn select_model(
    prob: &LikelihoodProblem,
    grid: &PenaltyGrid,
    conv: &ConvergenceConfig,
) -> Result<SelectionResult> {
    grid.validate()?;
    let null = fit_null(prob, conv)?;
    let gradient = null_gradient(prob, &null)?;
    let masks = CovariateMasks::all(prob.p, prob.transitions());
    let used = prob.transitions();

    let pre: Vec<Result<(Shortlist, ShortlistFits, usize)>> = grid
        .a_values
        .par_iter()
        .map(|&a| preselect_with_fits(prob, &null, &gradient, a, grid, conv))
        .collect();
    let mut shortlists = Vec::new();
    let mut candidates = Vec::new();
    let mut n_pre = 0;
    for item in pre {
        let (sl, betas, n_fits) = item?;
        n_pre += n_fits;
        let sizes = [0, 1, 2].map(|t| if used.contains(&Transition::from_index(t)) { sl.lambdas[t].len() } else { 1 });
        for i0 in 0..sizes[0] {
            for i1 in 0..sizes[1] {
                for i2 in 0..sizes[2] {
                    let pick = [i0, i1, i2];
                    let mut lambda = [0.0; 3];
                    let mut init = ParameterSet {
                        theta: null.params.theta.clone(),
                        beta: [0, 1, 2].map(|t| vec![0.0; masks.masks[t].len()]),
                    };
                    for &tr in used {
                        let t = tr.index();
                        lambda[t] = sl.lambdas[t][pick[t]];
                        init.beta[t] = betas[t][pick[t]].clone();
                    }
                    candidates.push(Candidate {
                        penalty: PenaltyConfig { a: sl.a, lambda },
                        init,
                    });
                }
            }
        }
        shortlists.push(sl);
    }

    let fits: Vec<Option<FitResult>> = candidates
        .par_iter()
        .map(|c| match fit_inner(prob, &masks, &c.penalty, conv, &c.init) {
            Ok(fit) => Some(fit),
            Err(e) => {
                log::warn!("candidate {:?} failed: {e}", c.penalty);
                None
            }
        })
        .collect();

    let n_failed = fits.iter().filter(|f| f.is_none()).count();
    let mut table = Vec::new();
    let mut best: Option<(f64, FitResult)> = None;
    for fit in fits.into_iter().flatten() {
        let b = bic(&fit, prob.n)?;
        table.push(BicRow {
            a: fit.penalty.a,
            lambda01: fit.penalty.lambda[0],
            lambda02: fit.penalty.lambda[1],
            lambda12: fit.penalty.lambda[2],
            bic: b,
            n_active: fit.n_active(),
            loglik: fit.unpenalized_ll,
            converged: fit.converged,
            monotone: fit.objective_monotone(),
        });
        let better = match &best {
            None => true,
            Some((bb, bf)) => preferred(b, &fit.penalty, *bb, &bf.penalty),
        };
        if better {
            best = Some((b, fit));
        }
    }
    let (best_bic, best_fit) = best.ok_or_else(|| IdmError::Selection("every candidate fit failed".into()))?;
    table.sort_by(|x, y| {
        x.a.total_cmp(&y.a)
            .then(y.lambda01.total_cmp(&x.lambda01))
            .then(y.lambda02.total_cmp(&x.lambda02))
            .then(y.lambda12.total_cmp(&x.lambda12))
    });
    Ok(SelectionResult {
        selected_penalty: best_fit.penalty,
        best_fit,
        best_bic,
        bic_table: table,
        shortlists,
        n_preselection_fits: n_pre,
        n_failed,
    })
}

fn preferred(bic: f64, pen: &PenaltyConfig, best_bic: f64, best: &PenaltyConfig) -> bool {
    bic.total_cmp(&best_bic)
        .then(best.lambda[0].total_cmp(&pen.lambda[0]))
        .then(best.lambda[1].total_cmp(&pen.lambda[1]))
        .then(best.lambda[2].total_cmp(&pen.lambda[2]))
        .then(best.a.total_cmp(&pen.a))
        .is_lt()
}
