use idm_core::baseline::{baseline_cumulative, baseline_intensity, BaselineSpec, ThetaBlock};
use idm_core::data::{CovariateMatrix, Dataset, ExactDataset, ExactRecord, ObservationRecord};
use idm_core::evaluation::{bootstrap_with_indices, run_study, selection_metrics, Method, StudyConfig};
use idm_core::inference::{predict_illness_probability, refit_mle, weibull_truth};
use idm_core::likelihood::{
    exact_time_log_likelihood, individual_log_likelihood, total_log_likelihood, transition_intensity, LikelihoodProblem,
    Observations,
};
use idm_core::model::{CovariateMasks, LikelihoodMode, ModelSpec, ParameterSet, Transition};
use idm_core::optimizer::{fit_inner, fit_null, ConvergenceConfig, PenaltyConfig};
use idm_core::quadrature::QuadratureRule;
use idm_core::selection::{lambda_grid_for_transition, null_gradient, select_model, PenaltyGrid};
use idm_core::simulation::{
    build_visit_schedule, gen_covariates, sample_transition_times, simulate_scenario, Correlation, Scenario, ScenarioConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rec(v0: f64, l: f64, r: Option<f64>, di: bool, t: f64, dd: bool) -> ObservationRecord {
    ObservationRecord {
        id: "s".into(),
        v0,
        l,
        r,
        delta_i: di,
        t,
        delta_d: dd,
    }
}

fn constant(a01: f64, a02: f64, a12: f64) -> (ModelSpec, ParameterSet) {
    let spec = ModelSpec::new(BaselineSpec::weibull(), CovariateMasks::empty(), LikelihoodMode::Interval);
    let theta = [a01, a02, a12].map(|r| ThetaBlock::from_effective(Transition::HealthyIll, &[1.0, r]));
    (spec, ParameterSet { theta, beta: Default::default() })
}

fn spline_params(seed: u64, p: usize) -> (ModelSpec, ParameterSet) {
    let baseline = BaselineSpec::simulation_default();
    let k = baseline.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParameterSet {
        theta: Transition::ALL.map(|tr| ThetaBlock::new(tr, (0..k).map(|_| rng.gen_range(0.2..0.8)).collect())),
        beta: [0, 1, 2].map(|_| (0..p).map(|_| rng.gen_range(-0.5..0.5)).collect()),
    };
    (ModelSpec::new(baseline, CovariateMasks::all(p, &Transition::ALL), LikelihoodMode::Interval), params)
}

fn first_columns(data: &Dataset, p: usize) -> Dataset {
    let cov = &data.covariates;
    let values = (0..cov.n_subjects).flat_map(|i| cov.row(i)[..p].to_vec()).collect();
    Dataset::new(data.records.clone(), CovariateMatrix::new(cov.n_subjects, p, values, cov.column_names[..p].to_vec()).unwrap()).unwrap()
}

fn scenario_a(n: usize, seed: u64, p: usize) -> Dataset {
    let cfg = ScenarioConfig::preset(Scenario::A1).with_sizes(n, 1);
    first_columns(&simulate_scenario(&cfg, seed).unwrap().train.data, p)
}

fn tight() -> ConvergenceConfig {
    ConvergenceConfig {
        e_a: 1e-12,
        e_b: 1e-12,
        max_outer_iter: 1000,
        ..ConvergenceConfig::default()
    }
}

#[test]
fn spline_cumulative_differentiates_to_intensity() {
    let (spec, params) = spline_params(3, 0);
    for t in [0.5, 4.0, 8.99, 9.01, 13.0, 17.5] {
        let th = params.theta(Transition::HealthyDead);
        let h = 1e-5;
        let fd = (baseline_cumulative(&spec.baseline, th, t + h).unwrap() - baseline_cumulative(&spec.baseline, th, t - h).unwrap()) / (2.0 * h);
        let a = baseline_intensity(&spec.baseline, th, t).unwrap();
        assert!((fd - a).abs() < 1e-6 * a.max(1.0), "t={t}: {fd} vs {a}");
    }
}

#[test]
fn each_m_spline_integrates_to_one() {
    let spec = BaselineSpec::simulation_default();
    let k = spec.n_params();
    let quad = QuadratureRule::gauss_legendre(30).unwrap();
    for j in 0..k {
        let mut raw = vec![0.0; k];
        raw[j] = 1.0;
        let th = ThetaBlock::new(Transition::HealthyIll, raw);
        // Composite trapezoid on a fine grid as an independent check.
        let n = 18_000;
        let h = 18.0 / n as f64;
        let f = |t: f64| baseline_intensity(&spec, &th, t.min(18.0)).unwrap();
        let trap: f64 = (0..n).map(|i| 0.5 * h * (f(i as f64 * h) + f((i + 1) as f64 * h))).sum();
        assert!((trap - 1.0).abs() < 1e-5, "basis {j}: {trap}");
        let gl = quad.integrate(0.0, 9.0, f) + quad.integrate(9.0, 18.0, f);
        assert!((gl - 1.0).abs() < 1e-10, "basis {j}: {gl}");
    }
}

#[test]
fn raw_sign_does_not_matter() {
    let spec = BaselineSpec::simulation_default();
    let raw = vec![0.3, -0.7, 0.2, 0.9, -0.1];
    let a = ThetaBlock::new(Transition::HealthyIll, raw.clone());
    let b = ThetaBlock::new(Transition::HealthyIll, raw.iter().map(|x| -x).collect());
    for t in [1.0, 10.0, 17.0] {
        assert_eq!(baseline_intensity(&spec, &a, t).unwrap(), baseline_intensity(&spec, &b, t).unwrap());
    }
}

#[test]
fn intensity_with_covariate() {
    let spec = ModelSpec::new(BaselineSpec::weibull(), CovariateMasks::all(1, &Transition::ALL), LikelihoodMode::Interval);
    let theta = Transition::ALL.map(|tr| ThetaBlock::from_effective(tr, &[1.0, 0.1]));
    let params = ParameterSet {
        theta,
        beta: [vec![2f64.ln()], vec![0.0], vec![0.0]],
    };
    for t in [0.5, 3.0, 12.0] {
        let v = transition_intensity(&params, &spec, Transition::HealthyIll, &[1.0], t).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        let v2 = transition_intensity(&params, &spec, Transition::HealthyIll, &[2.0], t).unwrap();
        assert!((v2 / v - 2.0).abs() < 1e-12);
        let v0 = transition_intensity(&params, &spec, Transition::HealthyDead, &[1.0], t).unwrap();
        assert!((v0 - 0.1).abs() < 1e-12);
    }
}

#[test]
fn duplicated_dataset_doubles_loglik() {
    let data = scenario_a(80, 5, 4);
    let (spec, params) = spline_params(9, 4);
    let quad = QuadratureRule::default();
    let single = total_log_likelihood(&data, &params, &spec, &quad).unwrap();
    let rows: Vec<usize> = (0..data.len()).chain(0..data.len()).collect();
    let double = total_log_likelihood(&data.select_rows(&rows), &params, &spec, &quad).unwrap();
    assert!((double - 2.0 * single).abs() <= 1e-10 * single.abs());
    let one = total_log_likelihood(&data.select_rows(&[3]), &params, &spec, &quad).unwrap();
    let ind = individual_log_likelihood(&data.records[3], data.covariates.row(3), &params, &spec, &quad).unwrap();
    assert_eq!(one, ind);
}

#[test]
fn mirrored_covariates_give_zero_gradient() {
    let records = vec![rec(0.0, 2.0, Some(5.0), true, 9.0, true), rec(0.0, 2.0, Some(5.0), true, 9.0, true)];
    let cov = CovariateMatrix::new(2, 2, vec![0.7, -1.2, -0.7, 1.2], CovariateMatrix::default_names(2)).unwrap();
    let data = Dataset::new(records, cov).unwrap();
    let (spec, mut params) = spline_params(4, 2);
    params.beta = [vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]];
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &spec.baseline, &QuadratureRule::default()).unwrap();
    let der = prob.beta_derivatives(&params, &spec.masks).unwrap();
    assert!(der.gradient.iter().all(|g| g.abs() < 1e-12), "{:?}", der.gradient);
}

#[test]
fn quadrature_is_converged_at_fifteen_points() {
    let data = scenario_a(200, 12, 5);
    let (spec, params) = spline_params(21, 5);
    let q15 = QuadratureRule::gauss_legendre(15).unwrap();
    let q30 = QuadratureRule::gauss_legendre(30).unwrap();
    for (i, r) in data.records.iter().enumerate() {
        let z = data.covariates.row(i);
        let a = individual_log_likelihood(r, z, &params, &spec, &q15).unwrap();
        let b = individual_log_likelihood(r, z, &params, &spec, &q30).unwrap();
        assert!((a - b).abs() < 1e-8, "subject {i}: {a} vs {b}");
    }
}

#[test]
fn shrinking_interval_approaches_exact_time() {
    let (spec, params) = spline_params(6, 0);
    let quad = QuadratureRule::default();
    let (onset, t) = (6.3, 11.0);
    let exact = ExactDataset::new(
        vec![ExactRecord {
            id: "s".into(),
            v0: 0.0,
            onset: Some(onset),
            t,
            delta_d: true,
        }],
        CovariateMatrix::new(1, 0, vec![], vec![]).unwrap(),
    )
    .unwrap();
    let target = exact_time_log_likelihood(&exact, &params, &spec).unwrap();
    let mut prev_gap = f64::INFINITY;
    for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
        let r = rec(0.0, onset - eps, Some(onset + eps), true, t, true);
        let v = individual_log_likelihood(&r, &[], &params, &spec, &quad).unwrap() - (2.0 * eps).ln();
        let gap = (v - target).abs();
        assert!(gap < prev_gap);
        prev_gap = gap;
    }
    assert!(prev_gap < 1e-6, "{prev_gap}");
}

#[test]
fn exact_time_closed_form() {
    let (a, b, c) = (0.1, 0.05, 0.2);
    let (spec, params) = constant(a, b, c);
    let (u, t) = (3.0, 8.0);
    let data = ExactDataset::new(
        vec![ExactRecord {
            id: "s".into(),
            v0: 0.0,
            onset: Some(u),
            t,
            delta_d: false,
        }],
        CovariateMatrix::new(1, 0, vec![], vec![]).unwrap(),
    )
    .unwrap();
    let want = -(a + b) * u + a.ln() - c * (t - u);
    assert!((exact_time_log_likelihood(&data, &params, &spec).unwrap() - want).abs() < 1e-12);
}

#[test]
fn vanishing_interval_drives_loglik_down() {
    let (spec, params) = spline_params(8, 0);
    let quad = QuadratureRule::default();
    let mut prev = f64::INFINITY;
    for w in [1.0, 0.1, 0.01, 1e-3, 1e-5, 1e-8] {
        let v = individual_log_likelihood(&rec(0.0, 4.0, Some(4.0 + w), true, 9.0, false), &[], &params, &spec, &quad).unwrap();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < -15.0);
}

#[test]
fn truncation_at_zero_is_a_no_op() {
    let (spec, params) = spline_params(10, 0);
    let quad = QuadratureRule::default();
    let v = individual_log_likelihood(&rec(0.0, 3.0, None, false, 7.0, true), &[], &params, &spec, &quad).unwrap();
    let later = individual_log_likelihood(&rec(2.0, 3.0, None, false, 7.0, true), &[], &params, &spec, &quad).unwrap();
    let a0 = |tr| baseline_cumulative(&spec.baseline, params.theta(tr), 2.0).unwrap();
    let divisor = a0(Transition::HealthyIll) + a0(Transition::HealthyDead);
    assert!((later - (v + divisor)).abs() < 1e-12);
}

#[test]
fn likelihood_prefers_the_truth() {
    let cfg = ScenarioConfig::preset(Scenario::A1).with_sizes(200, 1);
    let (spec, truth) = weibull_truth(cfg.weibull_theta1, cfg.weibull_theta2, &cfg.beta_true);
    let quad = QuadratureRule::default();
    let mut wins = 0;
    for seed in 0..100 {
        let data = simulate_scenario(&cfg, seed).unwrap().train.data;
        let at_truth = total_log_likelihood(&data, &truth, &spec, &quad).unwrap();
        let mut shifted = truth.clone();
        shifted.beta[0][0] += 1.0;
        let off = total_log_likelihood(&data, &shifted, &spec, &quad).unwrap();
        assert!(at_truth.is_finite());
        wins += (at_truth > off) as usize;
    }
    assert!(wins >= 95, "{wins}/100");
}

fn small_problem_data() -> Dataset {
    scenario_a(300, 31, 5)
}

#[test]
fn vanishing_penalty_matches_unpenalized_refit() {
    let data = small_problem_data();
    let quad = QuadratureRule::default();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &BaselineSpec::simulation_default(), &quad).unwrap();
    let masks = CovariateMasks::all(5, &Transition::ALL);
    let conv = tight();
    let null = fit_null(&prob, &conv).unwrap();
    let init = ParameterSet {
        theta: null.params.theta.clone(),
        beta: [vec![0.0; 5], vec![0.0; 5], vec![0.0; 5]],
    };
    let pen = fit_inner(&prob, &masks, &PenaltyConfig::new(1.0, [1e-8; 3]).unwrap(), &conv, &init).unwrap();
    let mle = refit_mle(&prob, &masks, &conv, None, &data.covariates.column_names).unwrap();
    assert!(mle.converged);
    for t in 0..3 {
        for q in 0..5 {
            assert!((pen.params.beta[t][q] - mle.params.beta[t][q]).abs() < 1e-2, "{t},{q}");
        }
    }
    assert!(mle.loglik >= pen.unpenalized_ll - 1e-8);

    let cov = mle.covariance.as_ref().expect("covariance");
    let d = mle.labels.len();
    let eig = DMatrix::from_row_slice(d, d, cov).symmetric_eigen();
    assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-8));
}

#[test]
fn rescaling_a_covariate_rescales_its_coefficient() {
    let data = small_problem_data();
    let quad = QuadratureRule::default();
    let baseline = BaselineSpec::simulation_default();
    let masks = CovariateMasks::all(5, &Transition::ALL);
    let conv = tight();
    let names = data.covariates.column_names.clone();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &baseline, &quad).unwrap();
    let base = refit_mle(&prob, &masks, &conv, None, &names).unwrap();
    let mut scaled = data.clone();
    for i in 0..scaled.len() {
        let v = scaled.covariates.get(i, 2) * 4.0;
        scaled.covariates.values[i * 5 + 2] = v;
    }
    let prob2 = LikelihoodProblem::new(Observations::Interval(&scaled), &baseline, &quad).unwrap();
    let fit2 = refit_mle(&prob2, &masks, &conv, None, &names).unwrap();
    for t in 0..3 {
        assert!((fit2.params.beta[t][2] * 4.0 - base.params.beta[t][2]).abs() < 1e-4);
        for i in [0, 17, 123] {
            let e1 = base.params.linear_predictor(&masks, Transition::ALL[t], data.covariates.row(i));
            let e2 = fit2.params.linear_predictor(&masks, Transition::ALL[t], scaled.covariates.row(i));
            assert!((e1 - e2).abs() < 1e-4);
        }
    }
}

#[test]
fn refit_recovers_exponential_rate_ratio() {
    // Constant hazards with onset bracketed to a width of 0.01, so the
    // healthy-to-dead rate ratio has the classical occurrence/exposure MLE.
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut exp = |rate: f64| -rng.gen_range(1e-12f64..1.0).ln() / rate;
    let (mut records, mut z) = (Vec::new(), Vec::new());
    let (mut d, mut e) = ([0.0; 2], [0.0; 2]);
    for i in 0..n {
        let g = i % 2;
        let (t01, t02, t12) = (exp(0.05), exp(0.1 * [1.0, 2.0][g]), exp(0.2));
        let healthy = t01.min(t02).min(10.0);
        e[g] += healthy;
        let rec = if t01 < t02 && t01 < 9.99 {
            let t = (t01 + t12).min(10.0).max(t01 + 0.005);
            ObservationRecord {
                id: format!("s{i}"),
                v0: 0.0,
                l: (t01 - 0.005).max(0.0),
                r: Some(t01 + 0.005),
                delta_i: true,
                t,
                delta_d: t01 + t12 < 10.0,
            }
        } else {
            d[g] += (t02 < 10.0 && t02 < t01) as u8 as f64;
            ObservationRecord {
                id: format!("s{i}"),
                v0: 0.0,
                l: healthy,
                r: None,
                delta_i: false,
                t: healthy,
                delta_d: t02 < 10.0 && t02 < t01,
            }
        };
        records.push(rec);
        z.push(g as f64);
    }
    let data = Dataset::new(records, CovariateMatrix::new(n, 1, z, vec!["x".into()]).unwrap()).unwrap();
    let quad = QuadratureRule::default();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &BaselineSpec::weibull(), &quad).unwrap();
    let masks = CovariateMasks {
        masks: [vec![], vec![0], vec![]],
    };
    let fit = refit_mle(&prob, &masks, &tight(), None, &["x".to_string()]).unwrap();
    let se = fit.beta_standard_errors().expect("standard errors")[1][0];
    let oracle = ((d[1] / e[1]) / (d[0] / e[0])).ln();
    assert!((fit.params.beta[1][0] - oracle).abs() < 2.0 * se, "{} vs {oracle} (se {se})", fit.params.beta[1][0]);
    assert!((se - (1.0 / d[0] + 1.0 / d[1]).sqrt()).abs() < 0.2 * se);
}

#[test]
fn illness_probability_is_monotone_and_bounded() {
    let (spec, params) = spline_params(14, 3);
    let quad = QuadratureRule::default();
    let z = [0.4, -1.0, 2.0];
    let mut prev = 0.0;
    for i in 0..=60 {
        let t = 18.0 * i as f64 / 60.0;
        let f = predict_illness_probability(&params, &spec, &z, t, &quad).unwrap();
        assert!((0.0..=1.0).contains(&f) && f >= prev);
        prev = f;
    }
}

#[test]
fn exponential_inversion_passes_ks() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zero = [vec![0.0; 1], vec![0.0; 1], vec![0.0; 1]];
    let mut t: Vec<f64> = (0..n)
        .map(|_| sample_transition_times([1.0, 1.0, 1.0], [0.1, 0.1, 0.1], &zero, &[0.0], &mut rng).t01)
        .collect();
    t.sort_by(f64::total_cmp);
    let d = t
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-0.1 * x).exp();
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic Kolmogorov critical value at the 1% level.
    assert!(d < 1.628 / (n as f64).sqrt(), "D = {d}");
}

fn corr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn covariate_correlation_structure() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ind = gen_covariates(n, 4, Correlation::Independent, &mut rng).unwrap();
    assert!(corr(&ind.column(0), &ind.column(3)).abs() < 0.02);
    let gt = gen_covariates(n, 20, Correlation::GroupToeplitz { rho: 0.5, block: 10 }, &mut rng).unwrap();
    assert!((corr(&gt.column(3), &gt.column(4)) - 0.5).abs() < 0.02);
    assert!(corr(&gt.column(9), &gt.column(10)).abs() < 0.02);
}

#[test]
fn visit_schedules() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let v = build_visit_schedule(4.5, 0.5, 0.05, 18.0, &mut rng);
        assert!(v.len() <= 5 && v[0] == 0.0 && v.iter().all(|&x| x <= 18.0));
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
    assert_eq!(build_visit_schedule(2.5, 0.5, 1.0, 18.0, &mut rng), vec![0.0]);
}

#[test]
fn identity_bootstrap_reproduces_the_fit() {
    let data = small_problem_data();
    let quad = QuadratureRule::default();
    let baseline = BaselineSpec::simulation_default();
    let pen = PenaltyConfig::new(1.0, [8.0, 8.0, 8.0]).unwrap();
    let conv = ConvergenceConfig::default();
    let ident: Vec<usize> = (0..data.len()).collect();
    let boot = bootstrap_with_indices(&data, &baseline, &quad, &pen, &[ident], &conv).unwrap();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &baseline, &quad).unwrap();
    let masks = CovariateMasks::all(5, &Transition::ALL);
    let mut init = idm_core::optimizer::crude_start(&prob, &masks);
    init.theta = fit_null(&prob, &conv).unwrap().params.theta;
    let fit = fit_inner(&prob, &masks, &pen, &conv, &init).unwrap();
    for tr in Transition::ALL {
        let counts = boot.tally.counts("bootstrap", tr).unwrap();
        for j in 0..5 {
            assert_eq!(counts[j], fit.active_set[tr.index()].contains(&j) as usize);
        }
    }
}

#[test]
fn degenerate_grid_has_one_candidate() {
    let data = scenario_a(150, 3, 5);
    let quad = QuadratureRule::default();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &BaselineSpec::simulation_default(), &quad).unwrap();
    let grid = PenaltyGrid {
        a_values: vec![1.0],
        shortlist: 1,
        ..PenaltyGrid::default()
    };
    let sel = select_model(&prob, &grid, &ConvergenceConfig::default()).unwrap();
    assert_eq!(sel.bic_table.len(), 1);
    assert_eq!(sel.n_preselection_fits, 3 * 20);
    assert_eq!(sel.best_bic, sel.bic_table[0].bic);
    for (t, s) in sel.shortlists[0].lambdas.iter().enumerate() {
        assert!(s.iter().all(|l| sel.shortlists[0].grids[t].contains(l)));
    }
}

#[test]
fn oracle_rows_have_no_false_positives_and_tallies_add_up() {
    let scenario = ScenarioConfig::preset(Scenario::B1).with_sizes(150, 50);
    let mut cfg = StudyConfig::desk(scenario.clone(), vec![Method::OracleIct], 3);
    cfg.n_replicates = 2;
    let report = run_study(&cfg).unwrap();
    let again = run_study(&cfg).unwrap();
    assert_eq!(report, again);
    let support = scenario.true_support();
    for row in report.rows_for(Method::OracleIct) {
        assert!(row.rates.iter().all(|r| r.fpr.unwrap_or(0.0) == 0.0));
        assert_eq!(row.rates, selection_metrics(&row.active_set, &support, scenario.p));
    }
    for tr in Transition::ALL {
        let counts = report.tally.counts("oracle-ict", tr).unwrap();
        for j in 0..scenario.p {
            let recount = report.rows_for(Method::OracleIct).filter(|r| r.active_set[tr.index()].contains(&j)).count();
            assert_eq!(counts[j], recount);
        }
    }
}

#[test]
fn active_set_grows_along_the_lambda_path() {
    let data = scenario_a(300, 17, 10);
    let quad = QuadratureRule::default();
    let prob = LikelihoodProblem::new(Observations::Interval(&data), &BaselineSpec::simulation_default(), &quad).unwrap();
    let conv = ConvergenceConfig::default();
    let null = fit_null(&prob, &conv).unwrap();
    let grad = null_gradient(&prob, &null).unwrap();
    let masks = CovariateMasks::all(10, &Transition::ALL);
    let mut pairs = 0;
    let mut ordered = 0;
    for a in [0.5, 1.0] {
        let grids = [0, 1, 2].map(|t| lambda_grid_for_transition(&grad[t], a, &PenaltyGrid::default()).unwrap());
        let mut init = ParameterSet {
            theta: null.params.theta.clone(),
            beta: [vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]],
        };
        let mut prev = None;
        for &l01 in &grids[0] {
            let pen = PenaltyConfig::new(a, [l01, grids[1][5], grids[2][5]]).unwrap();
            let fit = fit_inner(&prob, &masks, &pen, &conv, &init).unwrap();
            let k = fit.active_set[0].len();
            if let Some(p) = prev {
                pairs += 1;
                ordered += (k >= p) as usize;
            }
            prev = Some(k);
            init = fit.params.clone();
        }
    }
    assert!(ordered as f64 >= 0.95 * pairs as f64, "{ordered}/{pairs}");
}
