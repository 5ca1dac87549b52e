//! Unpenalized refit on a selected support, Wald intervals and predicted
//! illness probabilities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_cumulative, baseline_intensity, BaselineSpec, ThetaBlock};
use crate::error::{IdmError, Result};
use crate::likelihood::{FreeLayout, LikelihoodProblem};
use crate::model::{CovariateMasks, LikelihoodMode, ModelSpec, ParameterSet, Transition};
use crate::data::Standardization;
use crate::optimizer::{crude_start, fit_null, marquardt_step, ConvergenceConfig, Damping, PenaltyConfig, ThetaStep};
use crate::quadrature::QuadratureRule;

pub const WALD_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLEFit {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    /// Row-major covariance over the free parameters in `labels` order
    /// (optimizer-space baseline parameters, then coefficients).
    pub covariance: Option<Vec<f64>>,
    pub labels: Vec<String>,
    pub loglik: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

impl MLEFit {
    fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Standard errors of the regression coefficients, per transition.
    pub fn beta_standard_errors(&self) -> Option<[Vec<f64>; 3]> {
        let cov = self.covariance.as_ref()?;
        let dim = self.dim();
        let n_theta = dim - self.spec.masks.total();
        let mut pos = n_theta;
        Some([0, 1, 2].map(|t| {
            (0..self.spec.masks.masks[t].len())
                .map(|_| {
                    let v = cov[pos * dim + pos].max(0.0).sqrt();
                    pos += 1;
                    v
                })
                .collect()
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRatio {
    pub covariate: String,
    pub transition: Transition,
    pub beta: f64,
    pub se: f64,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn layout_labels(prob: &LikelihoodProblem, masks: &CovariateMasks, names: &[String]) -> Vec<String> {
    let mut labels = Vec::new();
    for tr in prob.transitions() {
        for k in 0..prob.n_theta() {
            labels.push(format!("theta{}_{}", tr.label(), k + 1));
        }
    }
    for tr in Transition::ALL {
        for &j in masks.get(tr) {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("z{}", j + 1));
            labels.push(format!("beta{}_{}", tr.label(), name));
        }
    }
    labels
}

/// Maximum likelihood on a fixed support with covariance from the inverse
/// negative Hessian. `init` must be aligned with `active`.
pub fn refit_mle(
    prob: &LikelihoodProblem,
    active: &CovariateMasks,
    conv: &ConvergenceConfig,
    init: Option<&ParameterSet>,
    names: &[String],
) -> Result<MLEFit> {
    conv.validate()?;
    active.validate(prob.p)?;
    let mut params = match init {
        Some(p) => p.clone(),
        None => {
            let mut p = crude_start(prob, active);
            p.theta = fit_null(prob, conv)?.params.theta;
            p
        }
    };
    let layout = FreeLayout::full(prob.transitions(), active);
    let mut damping = Damping::default();
    let mut ll = prob.log_likelihood(&params, active)?;
    let mut converged = false;
    let mut iterations = 0;
    let max_iter = conv.max_outer_iter * conv.max_ml_iter_per_cycle.max(1);
    for iter in 1..=max_iter {
        iterations = iter;
        let before = params.clone();
        let ll_before = ll;
        let status = marquardt_step(prob, &mut params, active, &layout, &mut damping, &mut ll)?;
        match status {
            ThetaStep::Stationary => {
                converged = true;
                break;
            }
            ThetaStep::Failed => break,
            ThetaStep::Accepted => {
                let step = before.theta_distance_sq(&params) + before.beta_distance_sq(&params);
                let rel = (ll - ll_before).abs() / ll_before.abs().max(f64::MIN_POSITIVE);
                if step < conv.e_a && rel < conv.e_b {
                    converged = true;
                    break;
                }
            }
        }
    }
    let (ll, _, h) = prob.free_derivatives(&params, active, &layout)?;
    let dim = layout.dim(prob.n_theta());
    let fixed = boundary_mask(prob, &params, dim);
    let covariance = interior_covariance(&h, dim, &fixed);
    if covariance.is_none() {
        log::warn!("negative Hessian is not positive definite; covariance omitted");
    }
    let mut spec = ModelSpec::new(prob.baseline.clone(), active.clone(), prob.mode);
    if prob.mode == LikelihoodMode::Phm {
        spec.masks.masks[2].clear();
    }
    Ok(MLEFit {
        spec,
        params,
        covariance,
        labels: layout_labels(prob, active, names),
        loglik: ll,
        converged,
        n_iterations: iterations,
    })
}

/// Spline weights this small relative to their block sit on the boundary of
/// the parameter space and are held fixed for the covariance.
const BOUNDARY_WEIGHT: f64 = 1e-10;

fn boundary_mask(prob: &LikelihoodProblem, params: &ParameterSet, dim: usize) -> Vec<bool> {
    let mut fixed = vec![false; dim];
    let mut pos = 0;
    for &tr in prob.transitions() {
        let w = params.theta(tr).effective();
        let top = w.iter().copied().fold(0.0, f64::max);
        for v in w {
            fixed[pos] = v <= BOUNDARY_WEIGHT * top;
            pos += 1;
        }
    }
    fixed
}

/// Inverse negative Hessian over the free coordinates; fixed coordinates get
/// zero rows and columns.
fn interior_covariance(h: &[f64], dim: usize, fixed: &[bool]) -> Option<Vec<f64>> {
    let keep: Vec<usize> = (0..dim).filter(|&i| !fixed[i]).collect();
    let m = keep.len();
    let neg = DMatrix::from_fn(m, m, |i, j| -h[keep[i] * dim + keep[j]]);
    let inv = neg.cholesky()?.inverse();
    if !inv.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut cov = vec![0.0; dim * dim];
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            cov[i * dim + j] = 0.5 * (inv[(a, b)] + inv[(b, a)]);
        }
    }
    Some(cov)
}

/// Wald intervals on the log scale: `exp(beta +- 1.96 se)`.
pub fn intensity_ratios(fit: &MLEFit, names: &[String]) -> Result<Vec<IntensityRatio>> {
    let se = fit
        .beta_standard_errors()
        .ok_or_else(|| IdmError::SingularHessian("no covariance available for the refit".into()))?;
    let mut out = Vec::new();
    for tr in Transition::ALL {
        let t = tr.index();
        for (q, &j) in fit.spec.masks.masks[t].iter().enumerate() {
            out.push(ratio_from(names.get(j).cloned().unwrap_or_else(|| format!("z{}", j + 1)), tr, fit.params.beta[t][q], se[t][q]));
        }
    }
    Ok(out)
}

pub fn ratio_from(covariate: String, transition: Transition, beta: f64, se: f64) -> IntensityRatio {
    if se == 0.0 {
        log::warn!("zero standard error for {covariate} on {transition}");
    }
    IntensityRatio {
        covariate,
        transition,
        beta,
        se,
        ratio: beta.exp(),
        ci_low: (beta - WALD_Z * se).exp(),
        ci_high: (beta + WALD_Z * se).exp(),
    }
}

/// A fitted model as stored on disk: enough to predict on new data and to
/// warm-start a refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub column_names: Vec<String>,
    pub standardization: Option<Standardization>,
    pub n_subjects: usize,
    pub loglik: f64,
    pub converged: bool,
    /// Penalty of a penalized fit; `None` after an unpenalized refit.
    pub penalty: Option<PenaltyConfig>,
    pub bic: Option<f64>,
    pub covariance: Option<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

impl FittedModel {
    pub fn from_refit(fit: MLEFit, column_names: Vec<String>, standardization: Option<Standardization>, n_subjects: usize) -> Self {
        Self {
            spec: fit.spec,
            params: fit.params,
            column_names,
            standardization,
            n_subjects,
            loglik: fit.loglik,
            converged: fit.converged,
            penalty: None,
            bic: None,
            covariance: fit.covariance,
            labels: Some(fit.labels),
        }
    }

    pub fn mle(&self) -> Option<MLEFit> {
        Some(MLEFit {
            spec: self.spec.clone(),
            params: self.params.clone(),
            covariance: self.covariance.clone(),
            labels: self.labels.clone()?,
            loglik: self.loglik,
            converged: self.converged,
            n_iterations: 0,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IdmError::io(path, e))?;
        let model: FittedModel = serde_json::from_str(&text)?;
        model.spec.masks.validate(model.column_names.len())?;
        model.params.validate(&model.spec)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| IdmError::io(path, e))
    }
}

/// Probabilities at `t` of having become ill, having died healthy, and
/// being alive and healthy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateProbabilities {
    pub f01: f64,
    pub f02: f64,
    pub survival: f64,
}

/// Subintervals per smooth piece in the prediction integral.
const PREDICTION_PIECES: usize = 8;

pub fn state_probabilities(
    params: &ParameterSet,
    spec: &ModelSpec,
    z: &[f64],
    t: f64,
    quad: &QuadratureRule,
) -> Result<StateProbabilities> {
    spec.baseline.check_time(t)?;
    let lo = spec.baseline.support().0;
    let e01 = params.linear_predictor(&spec.masks, Transition::HealthyIll, z).exp();
    let e02 = params.linear_predictor(&spec.masks, Transition::HealthyDead, z).exp();
    let th01 = params.theta(Transition::HealthyIll);
    let th02 = params.theta(Transition::HealthyDead);
    let surv = |u: f64| -> Result<f64> {
        let a = baseline_cumulative(&spec.baseline, th01, u)? * e01 + baseline_cumulative(&spec.baseline, th02, u)? * e02;
        Ok((-a).exp())
    };
    let mut cuts = vec![lo];
    cuts.extend(spec.baseline.interior_knots().iter().copied().filter(|&k| k > lo && k < t));
    cuts.push(t);
    let (mut f01, mut f02) = (0.0, 0.0);
    for piece in cuts.windows(2) {
        let width = (piece[1] - piece[0]) / PREDICTION_PIECES as f64;
        for s in 0..PREDICTION_PIECES {
            let a = piece[0] + s as f64 * width;
            for (u, w) in quad.mapped(a, a + width) {
                let s_u = surv(u)?;
                f01 += w * s_u * baseline_intensity(&spec.baseline, th01, u)? * e01;
                f02 += w * s_u * baseline_intensity(&spec.baseline, th02, u)? * e02;
            }
        }
    }
    Ok(StateProbabilities {
        f01,
        f02,
        survival: surv(t)?,
    })
}

/// `F01(t) = int_0^t exp(-A01(u) - A02(u)) a01(u) du`, clamped to [0, 1].
pub fn predict_illness_probability(
    params: &ParameterSet,
    spec: &ModelSpec,
    z: &[f64],
    t: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    Ok(state_probabilities(params, spec, z, t, quad)?.f01.clamp(0.0, 1.0))
}

/// Generating model of a Weibull simulation scenario in library form.
pub fn weibull_truth(theta1: [f64; 3], theta2: [f64; 3], beta_dense: &[Vec<f64>; 3]) -> (ModelSpec, ParameterSet) {
    let p = beta_dense[0].len();
    let masks = CovariateMasks::all(p, &Transition::ALL);
    let spec = ModelSpec::new(BaselineSpec::weibull(), masks, LikelihoodMode::Interval);
    let theta = Transition::ALL.map(|tr| ThetaBlock::from_effective(tr, &[theta1[tr.index()], theta2[tr.index()]]));
    let params = ParameterSet {
        theta,
        beta: beta_dense.clone(),
    };
    (spec, params)
}
