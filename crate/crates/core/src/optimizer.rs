//! Elastic-net penalized maximum likelihood for fixed `(a, lambda)`.
//!
//! Each outer iteration runs one proximal coordinate pass per transition
//! block and then up to a few Marquardt-Levenberg iterations on the baseline
//! parameters. A block pass fixes the per-subject gradient and Hessian in the
//! linear predictors, runs cyclic soft-threshold updates on that quadratic
//! surrogate, and accepts the proposal (with step halving) only when the
//! penalized objective does not decrease.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IdmError, Result};
use crate::likelihood::{BaselineCache, FreeLayout, LikelihoodProblem};
use crate::model::{CovariateMasks, ParameterSet, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub a: f64,
    pub lambda: [f64; 3],
}

impl PenaltyConfig {
    pub fn new(a: f64, lambda: [f64; 3]) -> Result<Self> {
        let cfg = Self { a, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No penalty at all; used for covariate-free and refit problems.
    pub fn none() -> Self {
        Self { a: 1.0, lambda: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(IdmError::InvalidInput(format!("mixing weight a = {} outside [0, 1]", self.a)));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(IdmError::InvalidInput(format!("invalid penalty {:?}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub e_a: f64,
    pub e_b: f64,
    pub max_outer_iter: usize,
    pub max_ml_iter_per_cycle: usize,
    /// Coordinate sweeps on the quadratic surrogate of one block.
    pub max_cd_passes_per_cycle: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            e_a: 1e-5,
            e_b: 1e-5,
            max_outer_iter: 200,
            max_ml_iter_per_cycle: 5,
            max_cd_passes_per_cycle: 25,
        }
    }
}

impl ConvergenceConfig {
    /// Tolerances used in the simulation study.
    pub fn simulation() -> Self {
        Self {
            e_a: 1e-7,
            e_b: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_a > 0.0 && self.e_b > 0.0) {
            return Err(IdmError::InvalidInput("convergence tolerances must be positive".into()));
        }
        if self.max_outer_iter == 0 {
            return Err(IdmError::InvalidInput("max_outer_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParameterSet,
    pub masks: CovariateMasks,
    pub penalized_ll: f64,
    pub unpenalized_ll: f64,
    /// Covariate indices with non-zero coefficients, per transition.
    pub active_set: [Vec<usize>; 3],
    pub n_iterations: usize,
    pub converged: bool,
    pub penalty: PenaltyConfig,
    /// Penalized objective after initialization and after every outer iteration.
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    /// Penalized objective never decreased between outer iterations.
    pub fn objective_monotone(&self) -> bool {
        self.objective_trace.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn n_active(&self) -> usize {
        self.active_set.iter().map(Vec::len).sum()
    }

    /// Parameters re-expressed on the active set only.
    pub fn active_params(&self, p: usize) -> (CovariateMasks, ParameterSet) {
        let masks = CovariateMasks {
            masks: self.active_set.clone(),
        };
        (masks.clone(), self.params.remap(&self.masks, &masks, p))
    }
}

pub fn soft_threshold(x: f64, lam: f64) -> f64 {
    if x > lam {
        x - lam
    } else if x < -lam {
        x + lam
    } else {
        0.0
    }
}

pub fn elastic_net_penalty(beta: &[Vec<f64>; 3], cfg: &PenaltyConfig) -> f64 {
    beta.iter()
        .zip(cfg.lambda)
        .map(|(b, lam)| {
            let l1: f64 = b.iter().map(|v| v.abs()).sum();
            let l2: f64 = b.iter().map(|v| v * v).sum();
            lam * (cfg.a * l1 + (1.0 - cfg.a) * l2)
        })
        .sum()
}

/// Closed-form minimizer of the penalized one-dimensional Taylor surrogate.
/// `x_kk` must be negative (a concave surrogate).
pub fn update_beta_coordinate(grad_k: f64, x_kk: f64, beta_k: f64, a: f64, lambda: f64) -> Result<f64> {
    if !(x_kk < 0.0) {
        return Err(IdmError::Internal(format!("coordinate curvature {x_kk} is not negative")));
    }
    Ok(soft_threshold(grad_k - beta_k * x_kk, a * lambda) / (2.0 * lambda * (1.0 - a) - x_kk))
}

/// Marquardt-Levenberg damping state, carried across calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Damping {
    pub delta: f64,
}

impl Default for Damping {
    fn default() -> Self {
        Self { delta: 0.01 }
    }
}

const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaStep {
    Accepted,
    Stationary,
    /// Damping overflowed without an ascent step.
    Failed,
}

/// Spline weights below this fraction of their block's largest weight count
/// as sitting at zero.
const ZERO_WEIGHT: f64 = 1e-6;

/// A raw spline coefficient at zero is a stationary point of the squared
/// parameterization even when the likelihood increases with the weight.
/// Positive curvature there flags that case; such coefficients are moved to
/// a small positive weight, halving it until the likelihood increases.
fn escape_zero_weights(
    prob: &LikelihoodProblem,
    params: &mut ParameterSet,
    masks: &CovariateMasks,
    layout: &FreeLayout,
    h: &[f64],
    ll0: f64,
    ll: &mut f64,
) -> Result<bool> {
    let dim = layout.dim(prob.n_theta());
    let k = prob.n_theta();
    let mut stuck = Vec::new();
    for (b, tr) in layout.theta.iter().enumerate() {
        let w = params.theta(*tr).effective();
        let top = w.iter().copied().fold(0.0, f64::max);
        for (j, &wj) in w.iter().enumerate() {
            let i = b * k + j;
            if wj <= ZERO_WEIGHT * top && h[i * dim + i] > 0.0 {
                stuck.push((tr.index(), j, 1e-3 * top));
            }
        }
    }
    if stuck.is_empty() {
        return Ok(false);
    }
    for halving in 0..30 {
        let scale = 0.5f64.powi(halving);
        let mut trial = params.clone();
        for &(t, j, w) in &stuck {
            trial.theta[t].raw[j] = (w * scale).sqrt();
        }
        if let Ok(ll1) = prob.log_likelihood(&trial, masks) {
            if ll1 > ll0 {
                log::debug!("moved {} spline weights off zero (log-likelihood {ll0} -> {ll1})", stuck.len());
                *params = trial;
                *ll = ll1;
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Generic damped Newton step on the free parameters of `layout`. Accepts
/// only a strict increase of the log-likelihood.
pub fn marquardt_step(
    prob: &LikelihoodProblem,
    params: &mut ParameterSet,
    masks: &CovariateMasks,
    layout: &FreeLayout,
    damping: &mut Damping,
    ll: &mut f64,
) -> Result<ThetaStep> {
    let (ll0, g, h) = prob.free_derivatives(params, masks, layout)?;
    let dim = g.len();
    if escape_zero_weights(prob, params, masks, layout, &h, ll0, ll)? {
        return Ok(ThetaStep::Accepted);
    }
    if dim == 0 || g.iter().all(|v| v.abs() < 1e-10) {
        *ll = ll0;
        return Ok(ThetaStep::Stationary);
    }
    let x0 = layout.read(params);
    let neg_h = DMatrix::from_fn(dim, dim, |i, j| -h[i * dim + j]);
    let gv = DVector::from_vec(g);
    while damping.delta < MAX_DAMPING {
        let mut m = neg_h.clone();
        for i in 0..dim {
            let d = m[(i, i)];
            m[(i, i)] = d + damping.delta * (d.abs() + 1.0);
        }
        if let Some(chol) = m.cholesky() {
            let step = chol.solve(&gv);
            if step.iter().all(|v| v.is_finite()) {
                let x1: Vec<f64> = x0.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
                let mut trial = params.clone();
                layout.write(&mut trial, &x1);
                if let Ok(ll1) = prob.log_likelihood(&trial, masks) {
                    if ll1 > ll0 {
                        *params = trial;
                        *ll = ll1;
                        damping.delta = (damping.delta * 0.5).max(1e-12);
                        return Ok(ThetaStep::Accepted);
                    }
                }
            }
        }
        damping.delta *= 2.0;
    }
    damping.delta = Damping::default().delta;
    *ll = ll0;
    Ok(ThetaStep::Failed)
}

/// One Marquardt-Levenberg iteration on the baseline parameters with the
/// regression coefficients held fixed.
pub fn marquardt_theta_step(
    prob: &LikelihoodProblem,
    params: &mut ParameterSet,
    masks: &CovariateMasks,
    damping: &mut Damping,
) -> Result<(ThetaStep, f64)> {
    let layout = FreeLayout::theta_only(prob.transitions());
    let mut ll = f64::NAN;
    let status = marquardt_step(prob, params, masks, &layout, damping, &mut ll)?;
    Ok((status, ll))
}

/// Starting parameters: constant baseline at crude event rates, `beta = 0`.
pub fn crude_start(prob: &LikelihoodProblem, masks: &CovariateMasks) -> ParameterSet {
    let rates = prob.crude_rates();
    let theta = Transition::ALL.map(|tr| {
        crate::baseline::ThetaBlock::new(tr, prob.baseline.constant_rate_raw(rates[tr.index()]))
    });
    let beta = [0, 1, 2].map(|t| vec![0.0; masks.masks[t].len()]);
    ParameterSet { theta, beta }
}

fn check_masks(prob: &LikelihoodProblem, masks: &CovariateMasks) -> Result<()> {
    masks.validate(prob.p)?;
    for tr in Transition::ALL {
        if !prob.transitions().contains(&tr) && !masks.get(tr).is_empty() {
            return Err(IdmError::InvalidInput(format!(
                "transition {tr} is not part of the {:?} likelihood but has covariates",
                prob.mode
            )));
        }
    }
    Ok(())
}

struct State<'a> {
    prob: &'a LikelihoodProblem,
    masks: &'a CovariateMasks,
    cfg: &'a PenaltyConfig,
    params: ParameterSet,
    cache: BaselineCache,
    eta: Vec<[f64; 3]>,
    ll: f64,
}

impl State<'_> {
    fn objective(&self) -> f64 {
        self.ll - elastic_net_penalty(&self.params.beta, self.cfg)
    }

    fn refresh(&mut self) -> Result<()> {
        self.cache = self.prob.baseline_cache(&self.params.theta);
        self.eta = self.prob.eta(&self.params, self.masks);
        self.ll = self.prob.eval_ll(&self.cache, &self.eta)?;
        Ok(())
    }

    /// Proximal coordinate pass over one transition block.
    fn beta_block(&mut self, tr: Transition, max_passes: usize) -> Result<()> {
        let t = tr.index();
        let cols = &self.masks.masks[t];
        if cols.is_empty() {
            return Ok(());
        }
        let prob = self.prob;
        let n = prob.n;
        let ev = prob.eval_eta(&self.cache, &self.eta)?;
        let diag = t; // packed index of (t, t)
        let h: Vec<f64> = ev.hess.iter().map(|hh| hh[diag]).collect();
        // Residual gradient r_i = g_i + h_i d_i of the quadratic surrogate.
        let mut r: Vec<f64> = ev.grad.iter().map(|g| g[t]).collect();
        let mut d = vec![0.0; n];
        let beta0 = self.params.beta[t].clone();
        let mut beta = beta0.clone();
        let lam = self.cfg.lambda[t];
        let a = self.cfg.a;
        let x: Vec<f64> = cols
            .iter()
            .map(|&j| {
                let raw: f64 = (0..n).map(|i| prob.z_value(i, j).powi(2) * h[i]).sum();
                // Marquardt-style inflation when the surrogate is not concave.
                if raw < -1e-12 {
                    raw
                } else {
                    -(raw.abs() + 1.0)
                }
            })
            .collect();
        for _ in 0..max_passes.max(1) {
            let mut max_change: f64 = 0.0;
            for (q, &j) in cols.iter().enumerate() {
                let grad: f64 = (0..n).map(|i| prob.z_value(i, j) * r[i]).sum();
                let new = update_beta_coordinate(grad, x[q], beta[q], a, lam)?;
                let step = new - beta[q];
                if step == 0.0 {
                    continue;
                }
                beta[q] = new;
                max_change = max_change.max(step.abs());
                for i in 0..n {
                    let dz = prob.z_value(i, j) * step;
                    d[i] += dz;
                    r[i] += h[i] * dz;
                }
            }
            if max_change < 1e-12 {
                break;
            }
        }
        if beta == beta0 {
            return Ok(());
        }
        let obj0 = self.objective();
        let mut s = 1.0;
        for _ in 0..40 {
            let trial: Vec<f64> = beta0.iter().zip(&beta).map(|(b0, b1)| b0 + s * (b1 - b0)).collect();
            let mut params = self.params.clone();
            params.beta[t] = trial;
            let mut eta = self.eta.clone();
            for (e, di) in eta.iter_mut().zip(&d) {
                e[t] += s * di;
            }
            if let Ok(ll) = prob.eval_ll(&self.cache, &eta) {
                let obj = ll - elastic_net_penalty(&params.beta, self.cfg);
                if obj >= obj0 {
                    // Recompute eta exactly to avoid drift from the increments.
                    self.params = params;
                    self.eta = prob.eta(&self.params, self.masks);
                    self.ll = prob.eval_ll(&self.cache, &self.eta)?;
                    return Ok(());
                }
            }
            s *= 0.5;
        }
        Ok(())
    }
}

/// Penalized fit for a fixed penalty from `init`.
pub fn fit_inner(
    prob: &LikelihoodProblem,
    masks: &CovariateMasks,
    cfg: &PenaltyConfig,
    conv: &ConvergenceConfig,
    init: &ParameterSet,
) -> Result<FitResult> {
    cfg.validate()?;
    conv.validate()?;
    check_masks(prob, masks)?;
    for t in 0..3 {
        if init.beta[t].len() != masks.masks[t].len() || init.theta[t].raw.len() != prob.n_theta() {
            return Err(IdmError::InvalidInput("initial parameters do not match the model".into()));
        }
    }
    let mut st = State {
        prob,
        masks,
        cfg,
        params: init.clone(),
        cache: prob.baseline_cache(&init.theta),
        eta: Vec::new(),
        ll: f64::NAN,
    };
    st.refresh()?;
    let mut trace = vec![st.objective()];
    let mut damping = Damping::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut theta_failed = false;
    for iter in 1..=conv.max_outer_iter {
        iterations = iter;
        let prev = st.params.clone();
        let prev_ll = st.ll;
        let prev_obj = st.objective();
        for &tr in prob.transitions() {
            st.beta_block(tr, conv.max_cd_passes_per_cycle)?;
        }
        theta_failed = false;
        for _ in 0..conv.max_ml_iter_per_cycle {
            let before = st.ll;
            let (status, ll) = marquardt_theta_step(prob, &mut st.params, masks, &mut damping)?;
            st.ll = ll;
            match status {
                ThetaStep::Accepted => {
                    if (st.ll - before).abs() <= 1e-12 * before.abs().max(1.0) {
                        break;
                    }
                }
                ThetaStep::Stationary => break,
                ThetaStep::Failed => {
                    theta_failed = true;
                    break;
                }
            }
        }
        st.cache = prob.baseline_cache(&st.params.theta);
        let obj = st.objective();
        // Both steps only accept ascent, so a lower value here is summation
        // rounding at a stationary point.
        if obj < prev_obj && prev_obj - obj <= 1e-12 * prev_obj.abs().max(1.0) {
            st.params = prev;
            st.refresh()?;
            st.ll = prev_ll;
            converged = true;
            break;
        }
        trace.push(obj);
        let step_sq = prev.theta_distance_sq(&st.params) + prev.beta_distance_sq(&st.params);
        let rel = (obj - prev_obj).abs() / prev_obj.abs().max(f64::MIN_POSITIVE);
        if step_sq < conv.e_a && rel < conv.e_b {
            converged = true;
            break;
        }
    }
    if theta_failed && !converged {
        log::warn!("baseline step found no ascent direction");
    }
    let active_set = [0, 1, 2].map(|t| {
        masks.masks[t]
            .iter()
            .zip(&st.params.beta[t])
            .filter(|(_, b)| **b != 0.0)
            .map(|(&j, _)| j)
            .collect()
    });
    Ok(FitResult {
        penalized_ll: st.objective(),
        unpenalized_ll: st.ll,
        params: st.params,
        masks: masks.clone(),
        active_set,
        n_iterations: iterations,
        converged,
        penalty: *cfg,
        objective_trace: trace,
    })
}

/// Covariate-free fit from crude rates.
pub fn fit_null(prob: &LikelihoodProblem, conv: &ConvergenceConfig) -> Result<FitResult> {
    let masks = CovariateMasks::empty();
    let init = crude_start(prob, &masks);
    fit_inner(prob, &masks, &PenaltyConfig::none(), conv, &init)
}

/// Subgradient optimality residual per coefficient, laid out like
/// `BetaDerivatives`. Zero at an exact penalized optimum.
pub fn kkt_residuals(prob: &LikelihoodProblem, fit: &FitResult) -> Result<Vec<f64>> {
    let der = prob.beta_derivatives(&fit.params, &fit.masks)?;
    let mut out = Vec::with_capacity(der.dim);
    for tr in Transition::ALL {
        let t = tr.index();
        let lam = fit.penalty.lambda[t];
        let a = fit.penalty.a;
        for (q, g) in der.gradient[der.block(tr)].iter().enumerate() {
            let b = fit.params.beta[t][q];
            let smooth = g - 2.0 * lam * (1.0 - a) * b;
            let res = if b == 0.0 {
                (smooth.abs() - a * lam).max(0.0)
            } else {
                (smooth - b.signum() * a * lam).abs()
            };
            out.push(res);
        }
    }
    Ok(out)
}
