//! Baseline transition intensities and their cumulatives.
//!
//! Two families are supported: Weibull, `a0(t) = s * r * (r t)^(s - 1)` with
//! shape `s` and rate `r`, and M-splines, `a0(t) = sum_k theta_k M_k(t)` whose
//! cumulative is `sum_k theta_k I_k(t)` with `I_k` the integrated M-spline.
//!
//! Optimizer-space parameters are squared to obtain the effective ones, so the
//! intensity stays non-negative without constraints.

use serde::{Deserialize, Serialize};

use crate::error::{IdmError, Result};
use crate::model::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineFamily {
    Weibull,
    #[serde(rename = "mspline")]
    MSpline,
}

/// Default knots for the simulation study, in years.
pub const SIMULATION_KNOTS: [f64; 3] = [0.0, 9.0, 18.0];
/// Default knots for cohort applications.
pub const APPLICATION_KNOTS: [f64; 4] = [0.0, 5.0, 9.0, 18.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBaselineSpec", into = "RawBaselineSpec")]
pub struct BaselineSpec {
    pub family: BaselineFamily,
    /// Boundary and interior knots, strictly ascending (M-spline only).
    pub knots: Vec<f64>,
    pub order: usize,
    basis: Option<MSplineBasis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaselineSpec {
    family: BaselineFamily,
    #[serde(default)]
    knots: Vec<f64>,
    #[serde(default = "default_order")]
    order: usize,
}

fn default_order() -> usize {
    4
}

impl TryFrom<RawBaselineSpec> for BaselineSpec {
    type Error = IdmError;

    fn try_from(raw: RawBaselineSpec) -> Result<Self> {
        match raw.family {
            BaselineFamily::Weibull => Ok(BaselineSpec::weibull()),
            BaselineFamily::MSpline => BaselineSpec::mspline(raw.knots, raw.order),
        }
    }
}

impl From<BaselineSpec> for RawBaselineSpec {
    fn from(spec: BaselineSpec) -> Self {
        RawBaselineSpec {
            family: spec.family,
            knots: spec.knots,
            order: spec.order,
        }
    }
}

impl BaselineSpec {
    pub fn weibull() -> Self {
        Self {
            family: BaselineFamily::Weibull,
            knots: Vec::new(),
            order: 0,
            basis: None,
        }
    }

    pub fn mspline(knots: Vec<f64>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(IdmError::InvalidInput("spline order must be at least 1".into()));
        }
        if knots.len() < 3 {
            return Err(IdmError::InvalidInput(format!(
                "M-spline needs at least 3 knots (boundaries plus one interior), got {}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IdmError::InvalidInput("knots must be finite and strictly ascending".into()));
        }
        let basis = MSplineBasis::new(&knots, order);
        Ok(Self {
            family: BaselineFamily::MSpline,
            knots,
            order,
            basis: Some(basis),
        })
    }

    /// Cubic M-splines on the simulation-study knots.
    pub fn simulation_default() -> Self {
        Self::mspline(SIMULATION_KNOTS.to_vec(), 4).expect("static knots are valid")
    }

    /// Number of baseline parameters per transition.
    pub fn n_params(&self) -> usize {
        match self.family {
            BaselineFamily::Weibull => 2,
            BaselineFamily::MSpline => self.knots.len() - 2 + self.order,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self.family {
            BaselineFamily::Weibull => (0.0, f64::INFINITY),
            BaselineFamily::MSpline => (self.knots[0], *self.knots.last().unwrap()),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (lower, upper) = self.support();
        // Allow a rounding-level overshoot at the right boundary.
        let slack = 1e-9 * upper.abs().max(1.0);
        if !(t >= lower && t <= upper + slack) || !t.is_finite() {
            return Err(IdmError::OutsideSupport { t, lower, upper });
        }
        Ok(())
    }

    pub fn spline_basis(&self) -> Option<&MSplineBasis> {
        self.basis.as_ref()
    }

    /// Interior knots; integrals are split there so each piece is smooth.
    pub fn interior_knots(&self) -> &[f64] {
        match self.family {
            BaselineFamily::Weibull => &[],
            BaselineFamily::MSpline => &self.knots[1..self.knots.len() - 1],
        }
    }

    /// Raw parameters giving a constant intensity `rate` over the support.
    pub fn constant_rate_raw(&self, rate: f64) -> Vec<f64> {
        match self.family {
            BaselineFamily::Weibull => vec![1.0, rate.sqrt()],
            BaselineFamily::MSpline => {
                let basis = self.basis.as_ref().expect("spline basis");
                // sum_k B_k = 1 and M_k = order * B_k / span_k.
                (0..basis.n_basis)
                    .map(|k| {
                        let span = basis.knots_m[k + basis.order] - basis.knots_m[k];
                        (rate * span / basis.order as f64).sqrt()
                    })
                    .collect()
            }
        }
    }
}

/// Optimizer-space baseline parameters for one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBlock {
    pub transition: Transition,
    pub raw: Vec<f64>,
}

impl ThetaBlock {
    pub fn new(transition: Transition, raw: Vec<f64>) -> Self {
        Self { transition, raw }
    }

    pub fn effective(&self) -> Vec<f64> {
        self.raw.iter().map(|r| r * r).collect()
    }

    /// Builds a block from effective (non-negative) parameters.
    pub fn from_effective(transition: Transition, eff: &[f64]) -> Self {
        Self {
            transition,
            raw: eff.iter().map(|v| v.max(0.0).sqrt()).collect(),
        }
    }
}

/// M-spline and I-spline basis on a fixed knot sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MSplineBasis {
    pub order: usize,
    pub n_basis: usize,
    /// Knots with `order` boundary repeats (for `M_k`).
    knots_m: Vec<f64>,
    /// Knots with `order + 1` boundary repeats (for `I_k`).
    knots_i: Vec<f64>,
}

impl MSplineBasis {
    pub fn new(knots: &[f64], order: usize) -> Self {
        let lo = knots[0];
        let hi = *knots.last().unwrap();
        let interior = &knots[1..knots.len() - 1];
        let augment = |reps: usize| {
            let mut v = vec![lo; reps];
            v.extend_from_slice(interior);
            v.extend(std::iter::repeat(hi).take(reps));
            v
        };
        Self {
            order,
            n_basis: interior.len() + order,
            knots_m: augment(order),
            knots_i: augment(order + 1),
        }
    }

    /// M-spline values `M_k(t)` for all `k`, written to `out`.
    pub fn m_values(&self, t: f64, out: &mut [f64]) {
        let mut b = vec![0.0; self.knots_m.len()];
        bspline_values(&self.knots_m, self.order, t, &mut b);
        for (k, o) in out.iter_mut().enumerate().take(self.n_basis) {
            let span = self.knots_m[k + self.order] - self.knots_m[k];
            *o = if span > 0.0 { self.order as f64 * b[k] / span } else { 0.0 };
        }
    }

    /// I-spline values `I_k(t) = int_lo^t M_k`, written to `out`.
    pub fn i_values(&self, t: f64, out: &mut [f64]) {
        let order = self.order + 1;
        let mut b = vec![0.0; self.knots_i.len()];
        bspline_values(&self.knots_i, order, t, &mut b);
        // d/dt B'_{i, k+1} = M_{i-1, k} - M_{i, k}, so I_k = sum_{i > k} B'_{i, k+1}.
        let n_i = self.knots_i.len() - order;
        let mut acc = 0.0;
        let mut suffix = vec![0.0; n_i + 1];
        for i in (0..n_i).rev() {
            acc += b[i];
            suffix[i] = acc;
        }
        for (k, o) in out.iter_mut().enumerate().take(self.n_basis) {
            *o = suffix[k + 1].clamp(0.0, 1.0);
        }
    }
}

/// Cox-de Boor recursion for all B-splines of `order` on `knots` at `x`.
/// The right boundary is included in the last non-degenerate interval.
fn bspline_values(knots: &[f64], order: usize, x: f64, out: &mut [f64]) {
    let n_int = knots.len() - 1;
    out.iter_mut().for_each(|v| *v = 0.0);
    let last = *knots.last().unwrap();
    let mut span = None;
    if x >= last {
        span = (0..n_int).rev().find(|&i| knots[i] < knots[i + 1]);
    } else {
        for i in 0..n_int {
            if knots[i] <= x && x < knots[i + 1] {
                span = Some(i);
                break;
            }
        }
    }
    let Some(span) = span else { return };
    out[span] = 1.0;
    for k in 2..=order {
        for i in 0..knots.len() - k {
            let d1 = knots[i + k - 1] - knots[i];
            let d2 = knots[i + k] - knots[i + 1];
            let a = if d1 > 0.0 { (x - knots[i]) / d1 * out[i] } else { 0.0 };
            let b = if d2 > 0.0 { (knots[i + k] - x) / d2 * out[i + 1] } else { 0.0 };
            out[i] = a + b;
        }
        out[knots.len() - k] = 0.0;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn baseline_intensity(spec: &BaselineSpec, theta: &ThetaBlock, t: f64) -> Result<f64> {
    spec.check_time(t)?;
    let eff = theta.effective();
    Ok(match spec.family {
        BaselineFamily::Weibull => weibull_hazard(eff[0], eff[1], t),
        BaselineFamily::MSpline => {
            let basis = spec.basis.as_ref().expect("spline basis");
            let mut m = vec![0.0; basis.n_basis];
            basis.m_values(t.min(spec.support().1), &mut m);
            dot(&eff, &m)
        }
    })
}

pub fn baseline_cumulative(spec: &BaselineSpec, theta: &ThetaBlock, t: f64) -> Result<f64> {
    spec.check_time(t)?;
    let eff = theta.effective();
    Ok(match spec.family {
        BaselineFamily::Weibull => weibull_cumulative(eff[0], eff[1], t),
        BaselineFamily::MSpline => {
            let basis = spec.basis.as_ref().expect("spline basis");
            let mut i = vec![0.0; basis.n_basis];
            basis.i_values(t.min(spec.support().1), &mut i);
            dot(&eff, &i)
        }
    })
}

pub fn weibull_hazard(shape: f64, rate: f64, t: f64) -> f64 {
    if t == 0.0 {
        return if shape == 1.0 { rate } else if shape < 1.0 { f64::INFINITY } else { 0.0 };
    }
    shape * rate * (rate * t).powf(shape - 1.0)
}

pub fn weibull_cumulative(shape: f64, rate: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    (rate * t).powf(shape)
}

/// Basis data at one evaluation time: spline values when the family is an
/// M-spline, otherwise just the time.
#[derive(Debug, Clone, Copy)]
pub struct PointBasis<'a> {
    pub t: f64,
    pub m: &'a [f64],
    pub i: &'a [f64],
}

impl BaselineSpec {
    /// `log a0(t)` with gradient and Hessian (row-major) with respect to the
    /// effective parameters.
    pub fn log_hazard_derivs(&self, eff: &[f64], at: PointBasis<'_>, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        match self.family {
            BaselineFamily::Weibull => {
                let (s, r, t) = (eff[0], eff[1], at.t);
                let lt = t.ln();
                let lr = r.ln();
                grad[0] = 1.0 / s + lr + lt;
                grad[1] = s / r;
                hess[0] = -1.0 / (s * s);
                hess[1] = 1.0 / r;
                hess[2] = 1.0 / r;
                hess[3] = -s / (r * r);
                s.ln() + s * lr + (s - 1.0) * lt
            }
            BaselineFamily::MSpline => {
                let k = eff.len();
                let a = dot(eff, at.m);
                for j in 0..k {
                    grad[j] = at.m[j] / a;
                }
                for j in 0..k {
                    for l in 0..k {
                        hess[j * k + l] = -grad[j] * grad[l];
                    }
                }
                a.ln()
            }
        }
    }

    pub fn log_hazard(&self, eff: &[f64], at: PointBasis<'_>) -> f64 {
        match self.family {
            BaselineFamily::Weibull => {
                let (s, r) = (eff[0], eff[1]);
                s.ln() + s * r.ln() + (s - 1.0) * at.t.ln()
            }
            BaselineFamily::MSpline => dot(eff, at.m).ln(),
        }
    }

    /// `A0(t)` with gradient and Hessian with respect to the effective parameters.
    pub fn cumulative_derivs(&self, eff: &[f64], at: PointBasis<'_>, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        match self.family {
            BaselineFamily::Weibull => {
                let (s, r, t) = (eff[0], eff[1], at.t);
                if t <= 0.0 {
                    grad[..2].iter_mut().for_each(|g| *g = 0.0);
                    hess[..4].iter_mut().for_each(|h| *h = 0.0);
                    return 0.0;
                }
                let lrt = (r * t).ln();
                let a = (s * lrt).exp();
                grad[0] = a * lrt;
                grad[1] = a * s / r;
                hess[0] = a * lrt * lrt;
                hess[1] = a * (lrt * s / r + 1.0 / r);
                hess[2] = hess[1];
                hess[3] = a * s * (s - 1.0) / (r * r);
                a
            }
            BaselineFamily::MSpline => {
                let k = eff.len();
                grad[..k].copy_from_slice(&at.i[..k]);
                hess[..k * k].iter_mut().for_each(|h| *h = 0.0);
                dot(eff, at.i)
            }
        }
    }

    pub fn cumulative(&self, eff: &[f64], at: PointBasis<'_>) -> f64 {
        match self.family {
            BaselineFamily::Weibull => weibull_cumulative(eff[0], eff[1], at.t),
            BaselineFamily::MSpline => dot(eff, at.i),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(raw: &[f64]) -> ThetaBlock {
        ThetaBlock::new(Transition::HealthyIll, raw.to_vec())
    }

    fn weibull_block(shape: f64, rate: f64) -> ThetaBlock {
        ThetaBlock::from_effective(Transition::HealthyIll, &[shape, rate])
    }

    #[test]
    fn weibull_exponential_special_case() {
        let spec = BaselineSpec::weibull();
        let v = baseline_intensity(&spec, &weibull_block(1.0, 0.5), 3.0).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weibull_scenario_a_values() {
        let spec = BaselineSpec::weibull();
        let th = weibull_block(2.0, 0.015);
        let h = baseline_intensity(&spec, &th, 10.0).unwrap();
        assert!((h - 0.0045).abs() < 1e-15);
        let c = baseline_cumulative(&spec, &th, 10.0).unwrap();
        assert!((c - 0.0225).abs() < 1e-15);
    }

    #[test]
    fn cumulative_at_zero() {
        let sp = BaselineSpec::simulation_default();
        let th = block(&[1.0; 5]);
        assert_eq!(baseline_cumulative(&sp, &th, 0.0).unwrap(), 0.0);
        assert_eq!(baseline_cumulative(&BaselineSpec::weibull(), &weibull_block(2.0, 0.1), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn order_one_is_normalized_indicator() {
        let sp = BaselineSpec::mspline(vec![0.0, 9.0, 18.0], 1).unwrap();
        assert_eq!(sp.n_params(), 2);
        let v = baseline_intensity(&sp, &block(&[1.0, 0.0]), 4.0).unwrap();
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cubic_basis_count() {
        assert_eq!(BaselineSpec::simulation_default().n_params(), 5);
        let app = BaselineSpec::mspline(APPLICATION_KNOTS.to_vec(), 4).unwrap();
        assert_eq!(app.n_params(), 6);
    }

    #[test]
    fn i_splines_reach_one_at_last_knot() {
        let sp = BaselineSpec::simulation_default();
        let c = baseline_cumulative(&sp, &block(&[1.0; 5]), 18.0).unwrap();
        assert!((c - 5.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn outside_support_is_an_error() {
        let sp = BaselineSpec::simulation_default();
        assert!(matches!(
            baseline_intensity(&sp, &block(&[1.0; 5]), 18.5),
            Err(IdmError::OutsideSupport { .. })
        ));
        assert!(baseline_cumulative(&sp, &block(&[1.0; 5]), -0.1).is_err());
    }

    #[test]
    fn invalid_knots() {
        assert!(BaselineSpec::mspline(vec![0.0, 18.0], 4).is_err());
        assert!(BaselineSpec::mspline(vec![0.0, 9.0, 9.0], 4).is_err());
        assert!(BaselineSpec::mspline(vec![0.0, 9.0, 18.0], 0).is_err());
    }

    #[test]
    fn constant_rate_initialization() {
        let sp = BaselineSpec::simulation_default();
        let th = ThetaBlock::new(Transition::HealthyDead, sp.constant_rate_raw(0.07));
        for t in [0.0, 1.3, 9.0, 12.5, 18.0] {
            let v = baseline_intensity(&sp, &th, t).unwrap();
            assert!((v - 0.07).abs() < 1e-12, "t={t}: {v}");
        }
    }

    #[test]
    fn config_round_trip() {
        let sp = BaselineSpec::simulation_default();
        let json = serde_json::to_string(&sp).unwrap();
        let back: BaselineSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(sp, back);
        let bad = r#"{"family":"mspline","knots":[0.0,18.0],"order":4}"#;
        assert!(serde_json::from_str::<BaselineSpec>(bad).is_err());
    }
}
