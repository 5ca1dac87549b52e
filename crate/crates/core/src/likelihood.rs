//! Illness-death log-likelihood and its derivatives.
//!
//! Every subject's contribution is written as
//!
//! ```text
//! log L_i = sum(offset atoms) + log sum_terms exp(log_w + sum(term atoms))
//! ```
//!
//! where an atom is either `log a_tr(t) = log a0_tr(t) + eta_tr` or
//! `c * A_tr(t) = c * A0_tr(t) * exp(eta_tr)`. Interval-censored integrals
//! become one term per Gauss-Legendre node, so the interval, exact-time and
//! competing-risks likelihoods share one evaluator. Integrals are split at
//! interior spline knots so each piece is smooth.
//!
//! Derivatives are taken with respect to `psi = (theta_tr, eta_tr)` per
//! transition and mapped to regression coefficients through `eta = beta . z`.

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineFamily, BaselineSpec, PointBasis, ThetaBlock};
use crate::data::{classify_case, Dataset, ExactDataset, LikelihoodCase, ObservationRecord, PhmCause, PhmDataset};
use crate::error::{IdmError, Result};
use crate::model::{CovariateMasks, LikelihoodMode, ModelSpec, ParameterSet, Transition};
use crate::quadrature::QuadratureRule;

#[derive(Debug, Clone, Copy, PartialEq)]
enum AtomKind {
    LogHazard,
    Cumulative,
}

#[derive(Debug, Clone, Copy)]
struct Atom {
    kind: AtomKind,
    tr: u8,
    coef: f64,
    point: u32,
}

#[derive(Debug, Clone, Copy)]
struct Term {
    log_weight: f64,
    atoms: (u32, u32),
}

#[derive(Debug, Clone, Copy)]
struct SubjectLayout {
    offsets: (u32, u32),
    terms: (u32, u32),
}

/// Input to [`LikelihoodProblem::new`].
#[derive(Debug, Clone, Copy)]
pub enum Observations<'a> {
    Interval(&'a Dataset),
    Exact(&'a ExactDataset),
    Phm(&'a PhmDataset),
}

impl Observations<'_> {
    pub fn mode(&self) -> LikelihoodMode {
        match self {
            Observations::Interval(_) => LikelihoodMode::Interval,
            Observations::Exact(_) => LikelihoodMode::Exact,
            Observations::Phm(_) => LikelihoodMode::Phm,
        }
    }
}

/// A dataset compiled against a baseline family and quadrature rule.
/// Independent of covariate masks and parameter values.
#[derive(Debug, Clone)]
pub struct LikelihoodProblem {
    pub mode: LikelihoodMode,
    pub baseline: BaselineSpec,
    pub n: usize,
    pub p: usize,
    z: Vec<f64>,
    ids: Vec<String>,
    k: usize,
    subjects: Vec<SubjectLayout>,
    terms: Vec<Term>,
    atoms: Vec<Atom>,
    times: Vec<f64>,
    basis_m: Vec<f64>,
    basis_i: Vec<f64>,
    crude: [f64; 3],
}

struct Builder<'a> {
    baseline: &'a BaselineSpec,
    quad: &'a QuadratureRule,
    k: usize,
    subjects: Vec<SubjectLayout>,
    terms: Vec<Term>,
    atoms: Vec<Atom>,
    times: Vec<f64>,
    basis_m: Vec<f64>,
    basis_i: Vec<f64>,
    // per-subject staging
    offsets: Vec<Atom>,
    staged_terms: Vec<(f64, Vec<Atom>)>,
}

impl<'a> Builder<'a> {
    fn new(baseline: &'a BaselineSpec, quad: &'a QuadratureRule) -> Self {
        Self {
            baseline,
            quad,
            k: baseline.n_params(),
            subjects: Vec::new(),
            terms: Vec::new(),
            atoms: Vec::new(),
            times: Vec::new(),
            basis_m: Vec::new(),
            basis_i: Vec::new(),
            offsets: Vec::new(),
            staged_terms: Vec::new(),
        }
    }

    fn point(&mut self, id: &str, t: f64) -> Result<u32> {
        self.baseline.check_time(t).map_err(|e| IdmError::Evaluation {
            id: id.to_string(),
            reason: e.to_string(),
        })?;
        let idx = self.times.len() as u32;
        self.times.push(t);
        if let Some(basis) = self.baseline.spline_basis() {
            let t = t.min(self.baseline.support().1);
            let start = self.basis_m.len();
            self.basis_m.resize(start + self.k, 0.0);
            self.basis_i.resize(start + self.k, 0.0);
            basis.m_values(t, &mut self.basis_m[start..]);
            basis.i_values(t, &mut self.basis_i[start..]);
        }
        Ok(idx)
    }

    fn hazard(tr: Transition, point: u32) -> Atom {
        Atom {
            kind: AtomKind::LogHazard,
            tr: tr.index() as u8,
            coef: 1.0,
            point,
        }
    }

    fn cumulative(tr: Transition, point: u32, coef: f64) -> Atom {
        Atom {
            kind: AtomKind::Cumulative,
            tr: tr.index() as u8,
            coef,
            point,
        }
    }

    fn truncation(&mut self, id: &str, v0: f64) -> Result<()> {
        if v0 > 0.0 {
            let pv = self.point(id, v0)?;
            self.offsets.push(Self::cumulative(Transition::HealthyIll, pv, 1.0));
            self.offsets.push(Self::cumulative(Transition::HealthyDead, pv, 1.0));
        }
        Ok(())
    }

    /// Terms for `int_a^b exp(-A01(u) - A02(u) + A12(u)) a01(u) du`, with any
    /// factors common to all nodes supplied in `extra`.
    fn onset_integral(&mut self, id: &str, a: f64, b: f64, extra: &[Atom]) -> Result<()> {
        if b <= a {
            return Ok(());
        }
        let mut cuts = vec![a];
        cuts.extend(self.baseline.interior_knots().iter().copied().filter(|&k| k > a && k < b));
        cuts.push(b);
        for piece in cuts.windows(2) {
            let nodes: Vec<(f64, f64)> = self.quad.mapped(piece[0], piece[1]).collect();
            for (u, w) in nodes {
                let pu = self.point(id, u)?;
                let mut atoms = vec![
                    Self::hazard(Transition::HealthyIll, pu),
                    Self::cumulative(Transition::HealthyIll, pu, -1.0),
                    Self::cumulative(Transition::HealthyDead, pu, -1.0),
                    Self::cumulative(Transition::IllDead, pu, 1.0),
                ];
                atoms.extend_from_slice(extra);
                self.staged_terms.push((w.ln(), atoms));
            }
        }
        Ok(())
    }

    fn finish_subject(&mut self) {
        let o0 = self.atoms.len() as u32;
        self.atoms.append(&mut self.offsets);
        let o1 = self.atoms.len() as u32;
        let t0 = self.terms.len() as u32;
        if self.staged_terms.is_empty() {
            self.staged_terms.push((0.0, Vec::new()));
        }
        for (log_weight, mut atoms) in self.staged_terms.drain(..) {
            let a0 = self.atoms.len() as u32;
            self.atoms.append(&mut atoms);
            let a1 = self.atoms.len() as u32;
            self.terms.push(Term {
                log_weight,
                atoms: (a0, a1),
            });
        }
        let t1 = self.terms.len() as u32;
        self.subjects.push(SubjectLayout {
            offsets: (o0, o1),
            terms: (t0, t1),
        });
    }

    fn interval_subject(&mut self, rec: &ObservationRecord) -> Result<()> {
        let id = rec.id.as_str();
        self.truncation(id, rec.v0)?;
        let pt = self.point(id, rec.t)?;
        match classify_case(rec) {
            LikelihoodCase::IllCensored | LikelihoodCase::IllDied => {
                // exp(-A12(T)) a12(T)^delta_D factors out of the integral.
                self.offsets.push(Self::cumulative(Transition::IllDead, pt, -1.0));
                if rec.delta_d {
                    self.offsets.push(Self::hazard(Transition::IllDead, pt));
                }
                let r = rec.r.expect("validated diagnosed record");
                self.onset_integral(id, rec.l, r, &[])?;
            }
            LikelihoodCase::HealthyCensored | LikelihoodCase::HealthyDied => {
                let mut direct = vec![
                    Self::cumulative(Transition::HealthyIll, pt, -1.0),
                    Self::cumulative(Transition::HealthyDead, pt, -1.0),
                ];
                if rec.delta_d {
                    direct.push(Self::hazard(Transition::HealthyDead, pt));
                }
                self.staged_terms.push((0.0, direct));
                let mut extra = vec![Self::cumulative(Transition::IllDead, pt, -1.0)];
                if rec.delta_d {
                    extra.push(Self::hazard(Transition::IllDead, pt));
                }
                self.onset_integral(id, rec.l, rec.t, &extra)?;
            }
        }
        self.finish_subject();
        Ok(())
    }

    fn exact_subject(&mut self, id: &str, v0: f64, onset: Option<f64>, t: f64, delta_d: bool) -> Result<()> {
        self.truncation(id, v0)?;
        let pt = self.point(id, t)?;
        match onset {
            Some(u) => {
                let pu = self.point(id, u)?;
                self.offsets.extend([
                    Self::hazard(Transition::HealthyIll, pu),
                    Self::cumulative(Transition::HealthyIll, pu, -1.0),
                    Self::cumulative(Transition::HealthyDead, pu, -1.0),
                    Self::cumulative(Transition::IllDead, pu, 1.0),
                    Self::cumulative(Transition::IllDead, pt, -1.0),
                ]);
                if delta_d {
                    self.offsets.push(Self::hazard(Transition::IllDead, pt));
                }
            }
            None => {
                self.offsets.extend([
                    Self::cumulative(Transition::HealthyIll, pt, -1.0),
                    Self::cumulative(Transition::HealthyDead, pt, -1.0),
                ]);
                if delta_d {
                    self.offsets.push(Self::hazard(Transition::HealthyDead, pt));
                }
            }
        }
        self.finish_subject();
        Ok(())
    }

    fn phm_subject(&mut self, id: &str, time: f64, cause: PhmCause) -> Result<()> {
        let pt = self.point(id, time)?;
        self.offsets.extend([
            Self::cumulative(Transition::HealthyIll, pt, -1.0),
            Self::cumulative(Transition::HealthyDead, pt, -1.0),
        ]);
        match cause {
            PhmCause::Illness => self.offsets.push(Self::hazard(Transition::HealthyIll, pt)),
            PhmCause::Death => self.offsets.push(Self::hazard(Transition::HealthyDead, pt)),
            PhmCause::None => {}
        }
        self.finish_subject();
        Ok(())
    }
}

/// Baseline values per atom for fixed `theta`: `log a0` for hazard atoms and
/// `coef * A0` for cumulative atoms.
#[derive(Debug, Clone)]
pub struct BaselineCache {
    values: Vec<f64>,
}

/// Per-subject log-likelihood with derivatives in the three linear predictors.
#[derive(Debug, Clone, Default)]
pub struct EtaEval {
    pub ll: f64,
    pub subject_ll: Vec<f64>,
    pub grad: Vec<[f64; 3]>,
    /// Packed symmetric 3x3 Hessians: `[00, 11, 22, 01, 02, 12]`.
    pub hess: Vec<[f64; 6]>,
}

#[inline]
pub fn packed_index(a: usize, b: usize) -> usize {
    match (a.min(b), a.max(b)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (0, 1) => 3,
        (0, 2) => 4,
        _ => 5,
    }
}

/// Free parameters of an optimization: raw `theta` for some transitions and
/// positions (within each mask) of free regression coefficients. Vector
/// order is all `theta` blocks first, then `beta` by transition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FreeLayout {
    pub theta: Vec<Transition>,
    pub beta: [Vec<usize>; 3],
}

impl FreeLayout {
    pub fn theta_only(transitions: &[Transition]) -> Self {
        Self {
            theta: transitions.to_vec(),
            beta: Default::default(),
        }
    }

    pub fn full(transitions: &[Transition], masks: &CovariateMasks) -> Self {
        Self {
            theta: transitions.to_vec(),
            beta: [0, 1, 2].map(|t| (0..masks.masks[t].len()).collect()),
        }
    }

    pub fn dim(&self, k: usize) -> usize {
        self.theta.len() * k + self.beta.iter().map(Vec::len).sum::<usize>()
    }

    pub fn read(&self, params: &ParameterSet) -> Vec<f64> {
        let mut x = Vec::new();
        for tr in &self.theta {
            x.extend_from_slice(&params.theta(*tr).raw);
        }
        for (t, pos) in self.beta.iter().enumerate() {
            x.extend(pos.iter().map(|&j| params.beta[t][j]));
        }
        x
    }

    pub fn write(&self, params: &mut ParameterSet, x: &[f64]) {
        let mut c = 0;
        for tr in &self.theta {
            let block = &mut params.theta[tr.index()].raw;
            let k = block.len();
            block.copy_from_slice(&x[c..c + k]);
            c += k;
        }
        for (t, pos) in self.beta.iter().enumerate() {
            for &j in pos {
                params.beta[t][j] = x[c];
                c += 1;
            }
        }
    }
}

/// Gradient and Hessian of the log-likelihood with respect to all
/// regression coefficients, laid out transition by transition along masks.
#[derive(Debug, Clone)]
pub struct BetaDerivatives {
    pub ll: f64,
    pub gradient: Vec<f64>,
    /// Row-major, `dim x dim`.
    pub hessian: Vec<f64>,
    pub dim: usize,
    pub block_starts: [usize; 3],
}

impl BetaDerivatives {
    pub fn hessian_diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.hessian[i * self.dim + i]).collect()
    }

    pub fn block(&self, tr: Transition) -> std::ops::Range<usize> {
        let t = tr.index();
        let end = if t == 2 { self.dim } else { self.block_starts[t + 1] };
        self.block_starts[t]..end
    }
}

fn log_sum_exp_weights(logs: &[f64], weights: &mut Vec<f64>) -> Option<(f64, f64)> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return None;
    }
    weights.clear();
    let mut s = 0.0;
    for &l in logs {
        let w = (l - m).exp();
        s += w;
        weights.push(w);
    }
    weights.iter_mut().for_each(|w| *w /= s);
    Some((m, s))
}

impl LikelihoodProblem {
    pub fn new(obs: Observations<'_>, baseline: &BaselineSpec, quad: &QuadratureRule) -> Result<Self> {
        let mut b = Builder::new(baseline, quad);
        let (z, p, ids) = match obs {
            Observations::Interval(data) => {
                for rec in &data.records {
                    rec.validate()?;
                    b.interval_subject(rec)?;
                }
                let ids = data.records.iter().map(|r| r.id.clone()).collect();
                (data.covariates.values.clone(), data.covariates.p, ids)
            }
            Observations::Exact(data) => {
                for rec in &data.records {
                    b.exact_subject(&rec.id, rec.v0, rec.onset, rec.t, rec.delta_d)?;
                }
                let ids = data.records.iter().map(|r| r.id.clone()).collect();
                (data.covariates.values.clone(), data.covariates.p, ids)
            }
            Observations::Phm(data) => {
                for rec in &data.records {
                    b.phm_subject(&rec.id, rec.time, rec.cause)?;
                }
                let ids = data.records.iter().map(|r| r.id.clone()).collect();
                (data.covariates.values.clone(), data.covariates.p, ids)
            }
        };
        let crude = crude_rates(obs);
        let n = b.subjects.len();
        if z.len() != n * p {
            return Err(IdmError::InvalidInput("covariates misaligned with records".into()));
        }
        Ok(Self {
            mode: obs.mode(),
            baseline: baseline.clone(),
            n,
            p,
            z,
            ids,
            k: b.k,
            subjects: b.subjects,
            terms: b.terms,
            atoms: b.atoms,
            times: b.times,
            basis_m: b.basis_m,
            basis_i: b.basis_i,
            crude,
        })
    }

    /// Events over exposure per transition, used to start the optimizer.
    pub fn crude_rates(&self) -> [f64; 3] {
        self.crude
    }

    pub fn n_theta(&self) -> usize {
        self.k
    }

    pub fn transitions(&self) -> &'static [Transition] {
        self.mode.transitions()
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub fn z_value(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.p + j]
    }

    pub fn subject_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    fn point_basis(&self, point: u32) -> PointBasis<'_> {
        let t = self.times[point as usize];
        match self.baseline.family {
            BaselineFamily::Weibull => PointBasis { t, m: &[], i: &[] },
            BaselineFamily::MSpline => {
                let s = point as usize * self.k;
                PointBasis {
                    t,
                    m: &self.basis_m[s..s + self.k],
                    i: &self.basis_i[s..s + self.k],
                }
            }
        }
    }

    pub fn baseline_cache(&self, theta: &[ThetaBlock; 3]) -> BaselineCache {
        let eff: Vec<Vec<f64>> = theta.iter().map(ThetaBlock::effective).collect();
        let values = self
            .atoms
            .iter()
            .map(|a| {
                let at = self.point_basis(a.point);
                let e = &eff[a.tr as usize];
                match a.kind {
                    AtomKind::LogHazard => self.baseline.log_hazard(e, at),
                    AtomKind::Cumulative => a.coef * self.baseline.cumulative(e, at),
                }
            })
            .collect();
        BaselineCache { values }
    }

    /// Linear predictors of every subject.
    pub fn eta(&self, params: &ParameterSet, masks: &CovariateMasks) -> Vec<[f64; 3]> {
        (0..self.n)
            .map(|i| {
                let z = self.z(i);
                Transition::ALL.map(|tr| params.linear_predictor(masks, tr, z))
            })
            .collect()
    }

    fn subject_eval<const DERIV: bool>(
        &self,
        s: usize,
        cache: &BaselineCache,
        eta: [f64; 3],
        scratch: &mut EtaScratch,
    ) -> Result<(f64, [f64; 3], [f64; 6])> {
        let lay = self.subjects[s];
        let e = eta.map(f64::exp);
        let mut off_ll = 0.0;
        let mut off_g = [0.0; 3];
        let mut off_h = [0.0; 3];
        for a in lay.offsets.0..lay.offsets.1 {
            let atom = self.atoms[a as usize];
            let base = cache.values[a as usize];
            let t = atom.tr as usize;
            match atom.kind {
                AtomKind::LogHazard => {
                    off_ll += base + eta[t];
                    if DERIV {
                        off_g[t] += 1.0;
                    }
                }
                AtomKind::Cumulative => {
                    let c = base * e[t];
                    off_ll += c;
                    if DERIV {
                        off_g[t] += c;
                        off_h[t] += c;
                    }
                }
            }
        }
        scratch.logs.clear();
        scratch.g.clear();
        scratch.h.clear();
        for ti in lay.terms.0..lay.terms.1 {
            let term = self.terms[ti as usize];
            let mut lt = term.log_weight;
            let mut g = [0.0; 3];
            let mut h = [0.0; 3];
            for a in term.atoms.0..term.atoms.1 {
                let atom = self.atoms[a as usize];
                let base = cache.values[a as usize];
                let t = atom.tr as usize;
                match atom.kind {
                    AtomKind::LogHazard => {
                        lt += base + eta[t];
                        if DERIV {
                            g[t] += 1.0;
                        }
                    }
                    AtomKind::Cumulative => {
                        let c = base * e[t];
                        lt += c;
                        if DERIV {
                            g[t] += c;
                            h[t] += c;
                        }
                    }
                }
            }
            scratch.logs.push(lt);
            if DERIV {
                scratch.g.push(g);
                scratch.h.push(h);
            }
        }
        let Some((m, sum)) = log_sum_exp_weights(&scratch.logs, &mut scratch.w) else {
            return Err(self.failure(s, "zero likelihood contribution (boundary of the parameter space)"));
        };
        let ll = off_ll + m + sum.ln();
        if !ll.is_finite() {
            return Err(self.failure(s, "non-finite log-likelihood contribution"));
        }
        let mut grad = [0.0; 3];
        let mut hess = [0.0; 6];
        if DERIV {
            for (idx, w) in scratch.w.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let g = scratch.g[idx];
                let h = scratch.h[idx];
                for a in 0..3 {
                    grad[a] += w * g[a];
                    hess[a] += w * (g[a] * g[a] + h[a]);
                }
                hess[3] += w * g[0] * g[1];
                hess[4] += w * g[0] * g[2];
                hess[5] += w * g[1] * g[2];
            }
            hess[0] -= grad[0] * grad[0];
            hess[1] -= grad[1] * grad[1];
            hess[2] -= grad[2] * grad[2];
            hess[3] -= grad[0] * grad[1];
            hess[4] -= grad[0] * grad[2];
            hess[5] -= grad[1] * grad[2];
            for a in 0..3 {
                grad[a] += off_g[a];
                hess[a] += off_h[a];
            }
        }
        Ok((ll, grad, hess))
    }

    fn failure(&self, s: usize, reason: &str) -> IdmError {
        IdmError::Evaluation {
            id: self.ids[s].clone(),
            reason: reason.to_string(),
        }
    }

    /// Total log-likelihood at fixed baseline values.
    pub fn eval_ll(&self, cache: &BaselineCache, eta: &[[f64; 3]]) -> Result<f64> {
        let mut scratch = EtaScratch::default();
        let mut total = 0.0;
        for (s, e) in eta.iter().enumerate() {
            total += self.subject_eval::<false>(s, cache, *e, &mut scratch)?.0;
        }
        Ok(total)
    }

    /// Log-likelihood with per-subject derivatives in the linear predictors.
    pub fn eval_eta(&self, cache: &BaselineCache, eta: &[[f64; 3]]) -> Result<EtaEval> {
        let mut scratch = EtaScratch::default();
        let mut out = EtaEval {
            ll: 0.0,
            subject_ll: Vec::with_capacity(self.n),
            grad: Vec::with_capacity(self.n),
            hess: Vec::with_capacity(self.n),
        };
        for (s, e) in eta.iter().enumerate() {
            let (ll, g, h) = self.subject_eval::<true>(s, cache, *e, &mut scratch)?;
            out.ll += ll;
            out.subject_ll.push(ll);
            out.grad.push(g);
            out.hess.push(h);
        }
        Ok(out)
    }

    pub fn log_likelihood(&self, params: &ParameterSet, masks: &CovariateMasks) -> Result<f64> {
        let cache = self.baseline_cache(&params.theta);
        self.eval_ll(&cache, &self.eta(params, masks))
    }

    pub fn subject_log_likelihoods(&self, params: &ParameterSet, masks: &CovariateMasks) -> Result<Vec<f64>> {
        let cache = self.baseline_cache(&params.theta);
        Ok(self.eval_eta(&cache, &self.eta(params, masks))?.subject_ll)
    }

    /// Analytic gradient and Hessian with respect to every masked coefficient.
    pub fn beta_derivatives(&self, params: &ParameterSet, masks: &CovariateMasks) -> Result<BetaDerivatives> {
        let cache = self.baseline_cache(&params.theta);
        let ev = self.eval_eta(&cache, &self.eta(params, masks))?;
        let mut block_starts = [0; 3];
        let mut dim = 0;
        for t in 0..3 {
            block_starts[t] = dim;
            dim += masks.masks[t].len();
        }
        let mut gradient = vec![0.0; dim];
        let mut hessian = vec![0.0; dim * dim];
        let cols: Vec<(usize, usize)> = (0..3)
            .flat_map(|t| masks.masks[t].iter().map(move |&j| (t, j)))
            .collect();
        let mut zrow = vec![0.0; dim];
        for i in 0..self.n {
            let z = self.z(i);
            for (c, &(_, j)) in cols.iter().enumerate() {
                zrow[c] = z[j];
            }
            for (a, &(ta, _)) in cols.iter().enumerate() {
                gradient[a] += zrow[a] * ev.grad[i][ta];
                for (b, &(tb, _)) in cols.iter().enumerate().skip(a) {
                    let v = zrow[a] * zrow[b] * ev.hess[i][packed_index(ta, tb)];
                    hessian[a * dim + b] += v;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                hessian[a * dim + b] = hessian[b * dim + a];
            }
        }
        Ok(BetaDerivatives {
            ll: ev.ll,
            gradient,
            hessian,
            dim,
            block_starts,
        })
    }

    /// Log-likelihood, gradient and Hessian (row-major) over the free
    /// parameters in `layout`, in optimizer (raw) space.
    pub fn free_derivatives(
        &self,
        params: &ParameterSet,
        masks: &CovariateMasks,
        layout: &FreeLayout,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let k = self.k;
        let d_psi = 3 * (k + 1);
        let eff: [Vec<f64>; 3] = [0, 1, 2].map(|t| params.theta[t].effective());
        let eta = self.eta(params, masks);

        // Free parameter -> (psi index, factor source).
        enum Src {
            Theta(usize, f64),
            Beta(usize, usize),
        }
        let mut srcs = Vec::new();
        for tr in &layout.theta {
            let t = tr.index();
            for j in 0..k {
                srcs.push(Src::Theta(t * (k + 1) + j, 2.0 * params.theta[t].raw[j]));
            }
        }
        for (t, pos) in layout.beta.iter().enumerate() {
            for &q in pos {
                srcs.push(Src::Beta(t * (k + 1) + k, masks.masks[t][q]));
            }
        }
        let dim = srcs.len();
        let has_beta = layout.beta.iter().any(|b| !b.is_empty());

        let mut ll = 0.0;
        let mut psi_grad_total = vec![0.0; d_psi];
        let mut psi_hess_total = vec![0.0; d_psi * d_psi];
        let mut grad = vec![0.0; dim];
        let mut hess = vec![0.0; dim * dim];
        let mut ws = PsiScratch::new(d_psi);
        let mut idx = vec![0usize; dim];
        let mut fac = vec![0.0; dim];
        for (a, src) in srcs.iter().enumerate() {
            match *src {
                Src::Theta(ix, f) => {
                    idx[a] = ix;
                    fac[a] = f;
                }
                Src::Beta(ix, _) => idx[a] = ix,
            }
        }
        for s in 0..self.n {
            ll += self.subject_psi(s, &eff, eta[s], &mut ws)?;
            for (t, h) in psi_grad_total.iter_mut().zip(&ws.grad) {
                *t += h;
            }
            if has_beta {
                let z = self.z(s);
                for (a, src) in srcs.iter().enumerate() {
                    if let Src::Beta(_, j) = *src {
                        fac[a] = z[j];
                    }
                }
                for a in 0..dim {
                    grad[a] += fac[a] * ws.grad[idx[a]];
                    for b in a..dim {
                        hess[a * dim + b] += fac[a] * fac[b] * ws.hess[idx[a] * d_psi + idx[b]];
                    }
                }
            } else {
                for (t, h) in psi_hess_total.iter_mut().zip(&ws.hess) {
                    *t += h;
                }
            }
        }
        if !has_beta {
            for a in 0..dim {
                grad[a] = fac[a] * psi_grad_total[idx[a]];
                for b in a..dim {
                    hess[a * dim + b] = fac[a] * fac[b] * psi_hess_total[idx[a] * d_psi + idx[b]];
                }
            }
        }
        // Second-order term of the squared encoding: d2 theta / d raw2 = 2.
        for (a, src) in srcs.iter().enumerate() {
            if let Src::Theta(ix, _) = *src {
                hess[a * dim + a] += 2.0 * psi_grad_total[ix];
            }
        }
        for a in 0..dim {
            for b in 0..a {
                hess[a * dim + b] = hess[b * dim + a];
            }
        }
        Ok((ll, grad, hess))
    }

    /// Per-subject log-likelihood with gradient and Hessian in psi space,
    /// left in `ws.grad` / `ws.hess`.
    fn subject_psi(&self, s: usize, eff: &[Vec<f64>; 3], eta: [f64; 3], ws: &mut PsiScratch) -> Result<f64> {
        let k = self.k;
        let d = 3 * (k + 1);
        let lay = self.subjects[s];
        let e = eta.map(f64::exp);

        // Offsets accumulate directly into grad/hess.
        ws.grad.iter_mut().for_each(|v| *v = 0.0);
        ws.hess.iter_mut().for_each(|v| *v = 0.0);
        let mut off_ll = 0.0;
        {
            let (g, h) = (&mut ws.off_g, &mut ws.off_h);
            g.iter_mut().for_each(|v| *v = 0.0);
            h.iter_mut().for_each(|v| *v = 0.0);
            for a in lay.offsets.0..lay.offsets.1 {
                off_ll += self.atom_psi(self.atoms[a as usize], eff, &eta, &e, g, h, &mut ws.tmp_g, &mut ws.tmp_h);
            }
        }
        let n_terms = (lay.terms.1 - lay.terms.0) as usize;
        ws.logs.clear();
        ws.term_g.resize(n_terms * d, 0.0);
        ws.term_h.resize(n_terms * d * d, 0.0);
        for (local, ti) in (lay.terms.0..lay.terms.1).enumerate() {
            let term = self.terms[ti as usize];
            let g = &mut ws.term_g[local * d..(local + 1) * d];
            let h = &mut ws.term_h[local * d * d..(local + 1) * d * d];
            g.iter_mut().for_each(|v| *v = 0.0);
            h.iter_mut().for_each(|v| *v = 0.0);
            let mut lt = term.log_weight;
            for a in term.atoms.0..term.atoms.1 {
                lt += self.atom_psi(self.atoms[a as usize], eff, &eta, &e, g, h, &mut ws.tmp_g, &mut ws.tmp_h);
            }
            ws.logs.push(lt);
        }
        let Some((m, sum)) = log_sum_exp_weights(&ws.logs, &mut ws.w) else {
            return Err(self.failure(s, "zero likelihood contribution (boundary of the parameter space)"));
        };
        let ll = off_ll + m + sum.ln();
        if !ll.is_finite() {
            return Err(self.failure(s, "non-finite log-likelihood contribution"));
        }
        for (local, w) in ws.w.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let g = &ws.term_g[local * d..(local + 1) * d];
            let h = &ws.term_h[local * d * d..(local + 1) * d * d];
            for a in 0..d {
                ws.grad[a] += w * g[a];
                if g[a] == 0.0 {
                    for b in 0..d {
                        ws.hess[a * d + b] += w * h[a * d + b];
                    }
                } else {
                    for b in 0..d {
                        ws.hess[a * d + b] += w * (g[a] * g[b] + h[a * d + b]);
                    }
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                ws.hess[a * d + b] -= ws.grad[a] * ws.grad[b];
            }
        }
        for a in 0..d {
            ws.grad[a] += ws.off_g[a];
        }
        for (h, o) in ws.hess.iter_mut().zip(&ws.off_h) {
            *h += o;
        }
        Ok(ll)
    }

    #[allow(clippy::too_many_arguments)]
    fn atom_psi(
        &self,
        atom: Atom,
        eff: &[Vec<f64>; 3],
        eta: &[f64; 3],
        e: &[f64; 3],
        g: &mut [f64],
        h: &mut [f64],
        tg: &mut [f64],
        th: &mut [f64],
    ) -> f64 {
        let k = self.k;
        let d = 3 * (k + 1);
        let t = atom.tr as usize;
        let base = t * (k + 1);
        let ie = base + k;
        let at = self.point_basis(atom.point);
        match atom.kind {
            AtomKind::LogHazard => {
                let v = self.baseline.log_hazard_derivs(&eff[t], at, tg, th);
                for j in 0..k {
                    g[base + j] += tg[j];
                    for l in 0..k {
                        h[(base + j) * d + base + l] += th[j * k + l];
                    }
                }
                g[ie] += 1.0;
                v + eta[t]
            }
            AtomKind::Cumulative => {
                let a0 = self.baseline.cumulative_derivs(&eff[t], at, tg, th);
                let c = atom.coef * e[t];
                for j in 0..k {
                    let gj = c * tg[j];
                    g[base + j] += gj;
                    h[(base + j) * d + ie] += gj;
                    h[ie * d + base + j] += gj;
                    for l in 0..k {
                        h[(base + j) * d + base + l] += c * th[j * k + l];
                    }
                }
                let v = c * a0;
                g[ie] += v;
                h[ie * d + ie] += v;
                v
            }
        }
    }
}

#[derive(Default)]
struct EtaScratch {
    logs: Vec<f64>,
    w: Vec<f64>,
    g: Vec<[f64; 3]>,
    h: Vec<[f64; 3]>,
}

struct PsiScratch {
    grad: Vec<f64>,
    hess: Vec<f64>,
    off_g: Vec<f64>,
    off_h: Vec<f64>,
    tmp_g: Vec<f64>,
    tmp_h: Vec<f64>,
    logs: Vec<f64>,
    w: Vec<f64>,
    term_g: Vec<f64>,
    term_h: Vec<f64>,
}

impl PsiScratch {
    fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
            off_g: vec![0.0; d],
            off_h: vec![0.0; d * d],
            tmp_g: vec![0.0; d],
            tmp_h: vec![0.0; d * d],
            logs: Vec::new(),
            w: Vec::new(),
            term_g: Vec::new(),
            term_h: Vec::new(),
        }
    }
}

/// Events / person-time per transition. Interval-censored onsets are put at
/// the interval mid-point. Floored so every rate is positive.
pub fn crude_rates(obs: Observations<'_>) -> [f64; 3] {
    let mut events = [0.0; 3];
    let mut exposure = [0.0; 3];
    let mut add = |v0: f64, onset: Option<f64>, t: f64, died: bool| match onset {
        Some(u) => {
            events[0] += 1.0;
            exposure[0] += u - v0;
            exposure[1] += u - v0;
            exposure[2] += t - u;
            if died {
                events[2] += 1.0;
            }
        }
        None => {
            exposure[0] += t - v0;
            exposure[1] += t - v0;
            if died {
                events[1] += 1.0;
            }
        }
    };
    match obs {
        Observations::Interval(d) => {
            for r in &d.records {
                add(r.v0, r.r.map(|r_| 0.5 * (r.l + r_)), r.t, r.delta_d);
            }
        }
        Observations::Exact(d) => {
            for r in &d.records {
                add(r.v0, r.onset, r.t, r.delta_d);
            }
        }
        Observations::Phm(d) => {
            for r in &d.records {
                exposure[0] += r.time;
                exposure[1] += r.time;
                match r.cause {
                    PhmCause::Illness => events[0] += 1.0,
                    PhmCause::Death => events[1] += 1.0,
                    PhmCause::None => {}
                }
            }
        }
    }
    [0, 1, 2].map(|t| ((events[t] + 0.5) / exposure[t].max(1e-8)).max(1e-6))
}

/// `a_tr(t) = a0_tr(t) * exp(beta_tr . z)`.
pub fn transition_intensity(
    params: &ParameterSet,
    spec: &ModelSpec,
    tr: Transition,
    z: &[f64],
    t: f64,
) -> Result<f64> {
    let a0 = crate::baseline::baseline_intensity(&spec.baseline, params.theta(tr), t)?;
    Ok(a0 * params.linear_predictor(&spec.masks, tr, z).exp())
}

pub fn transition_cumulative(
    params: &ParameterSet,
    spec: &ModelSpec,
    tr: Transition,
    z: &[f64],
    t: f64,
) -> Result<f64> {
    let a0 = crate::baseline::baseline_cumulative(&spec.baseline, params.theta(tr), t)?;
    Ok(a0 * params.linear_predictor(&spec.masks, tr, z).exp())
}

fn single_subject(rec: &ObservationRecord, z: &[f64]) -> Result<Dataset> {
    let cov = crate::data::CovariateMatrix::new(1, z.len(), z.to_vec(), crate::data::CovariateMatrix::default_names(z.len()))?;
    Dataset::new(vec![rec.clone()], cov)
}

pub fn individual_log_likelihood(
    rec: &ObservationRecord,
    z: &[f64],
    params: &ParameterSet,
    spec: &ModelSpec,
    quad: &QuadratureRule,
) -> Result<f64> {
    let data = single_subject(rec, z)?;
    LikelihoodProblem::new(Observations::Interval(&data), &spec.baseline, quad)?.log_likelihood(params, &spec.masks)
}

pub fn total_log_likelihood(data: &Dataset, params: &ParameterSet, spec: &ModelSpec, quad: &QuadratureRule) -> Result<f64> {
    LikelihoodProblem::new(Observations::Interval(data), &spec.baseline, quad)?.log_likelihood(params, &spec.masks)
}

pub fn beta_derivatives(
    data: &Dataset,
    params: &ParameterSet,
    spec: &ModelSpec,
    quad: &QuadratureRule,
) -> Result<BetaDerivatives> {
    LikelihoodProblem::new(Observations::Interval(data), &spec.baseline, quad)?.beta_derivatives(params, &spec.masks)
}

pub fn exact_time_log_likelihood(data: &ExactDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    let quad = QuadratureRule::gauss_legendre(1)?;
    LikelihoodProblem::new(Observations::Exact(data), &spec.baseline, &quad)?.log_likelihood(params, &spec.masks)
}

pub fn phm_log_likelihood(data: &PhmDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    let quad = QuadratureRule::gauss_legendre(1)?;
    LikelihoodProblem::new(Observations::Phm(data), &spec.baseline, &quad)?.log_likelihood(params, &spec.masks)
}

/// Serializable summary of a likelihood evaluation failure count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvaluationDiagnostics {
    pub failed_subjects: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateMatrix, ExactRecord, PhmRecord};

    pub(crate) fn exp_params(a01: f64, a02: f64, a12: f64, masks: &CovariateMasks) -> ParameterSet {
        let theta = [(Transition::HealthyIll, a01), (Transition::HealthyDead, a02), (Transition::IllDead, a12)]
            .map(|(tr, r)| ThetaBlock::from_effective(tr, &[1.0, r]));
        let beta = [0, 1, 2].map(|t| vec![0.0; masks.masks[t].len()]);
        ParameterSet { theta, beta }
    }

    fn weibull_spec() -> ModelSpec {
        ModelSpec::new(BaselineSpec::weibull(), CovariateMasks::empty(), LikelihoodMode::Interval)
    }

    fn rec(l: f64, r: Option<f64>, t: f64, dd: bool) -> ObservationRecord {
        ObservationRecord {
            id: "s".into(),
            v0: 0.0,
            l,
            r,
            delta_i: r.is_some(),
            t,
            delta_d: dd,
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn zero_hazards_healthy_censored_is_zero() {
        let spec = ModelSpec::new(BaselineSpec::simulation_default(), CovariateMasks::empty(), LikelihoodMode::Interval);
        let params = ParameterSet::zeros(&spec);
        let ll = individual_log_likelihood(&rec(3.0, None, 5.0, false), &[0.0], &params, &spec, &QuadratureRule::default()).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn healthy_censored_at_last_visit() {
        let spec = weibull_spec();
        let p = exp_params(0.1, 0.1, 0.3, &spec.masks);
        let ll = individual_log_likelihood(&rec(5.0, None, 5.0, false), &[0.0], &p, &spec, &QuadratureRule::default()).unwrap();
        assert!((ll + 1.0).abs() < 1e-14, "{ll}");
    }

    #[test]
    fn ill_censored_closed_form() {
        let (a01, a02, a12) = (0.1, 0.05, 0.2);
        let spec = weibull_spec();
        let p = exp_params(a01, a02, a12, &spec.masks);
        let ll = individual_log_likelihood(&rec(2.0, Some(4.0), 6.0, false), &[0.0], &p, &spec, &QuadratureRule::default()).unwrap();
        let c = a12 - a01 - a02;
        let exact = a01 * (-a12 * 6.0f64).exp() * (((c * 4.0).exp() - (c * 2.0).exp()) / c);
        assert!(close(ll, exact.ln(), 1e-8), "{ll} vs {}", exact.ln());
    }

    #[test]
    fn phm_closed_forms() {
        let spec = ModelSpec::new(BaselineSpec::weibull(), CovariateMasks::empty(), LikelihoodMode::Phm);
        let cov = CovariateMatrix::new(1, 1, vec![0.0], vec!["z1".into()]).unwrap();
        let one = |time, cause| PhmDataset {
            records: vec![PhmRecord { id: "a".into(), time, cause }],
            covariates: cov.clone(),
        };
        let p = exp_params(0.1, 1e-300, 0.0, &spec.masks);
        let ll = phm_log_likelihood(&one(5.0, PhmCause::Illness), &p, &spec).unwrap();
        assert!(close(ll, 0.1f64.ln() - 0.5, 1e-12));
        let p = exp_params(1e-300, 0.07, 0.0, &spec.masks);
        let ll = phm_log_likelihood(&one(4.0, PhmCause::Death), &p, &spec).unwrap();
        assert!(close(ll, 0.07f64.ln() - 0.28, 1e-12));
        let spline = ModelSpec::new(BaselineSpec::simulation_default(), CovariateMasks::empty(), LikelihoodMode::Phm);
        let zero = ParameterSet::zeros(&spline);
        assert_eq!(phm_log_likelihood(&one(7.0, PhmCause::None), &zero, &spline).unwrap(), 0.0);
    }

    #[test]
    fn exact_closed_form() {
        let spec = weibull_spec();
        let (a01, a02, a12) = (0.1, 0.05, 0.2);
        let p = exp_params(a01, a02, a12, &spec.masks);
        let cov = CovariateMatrix::new(1, 1, vec![0.0], vec!["z1".into()]).unwrap();
        let data = ExactDataset::new(
            vec![ExactRecord { id: "a".into(), v0: 0.0, onset: Some(3.0), t: 8.0, delta_d: false }],
            cov,
        )
        .unwrap();
        let ll = exact_time_log_likelihood(&data, &p, &spec).unwrap();
        let exact = (-(a01 + a02) * 3.0f64).exp() * a01 * (-a12 * 5.0f64).exp();
        assert!(close(ll, exact.ln(), 1e-12));
    }

    #[test]
    fn free_derivatives_match_finite_differences() {
        let spec = ModelSpec::new(
            BaselineSpec::simulation_default(),
            CovariateMasks::all(2, &Transition::ALL),
            LikelihoodMode::Interval,
        );
        let records = vec![
            rec(2.0, Some(4.5), 11.0, true),
            rec(2.0, Some(4.5), 18.0, false),
            rec(7.5, None, 12.0, true),
            rec(10.0, None, 18.0, false),
            ObservationRecord { v0: 1.0, ..rec(3.0, None, 9.5, true) },
        ];
        let z = vec![0.3, -1.0, 1.2, 0.4, -0.7, 0.1, 0.0, 2.0, -0.5, 0.5];
        let data = Dataset::new(records, CovariateMatrix::new(5, 2, z, CovariateMatrix::default_names(2)).unwrap()).unwrap();
        let prob = LikelihoodProblem::new(Observations::Interval(&data), &spec.baseline, &QuadratureRule::default()).unwrap();
        let mut params = ParameterSet::zeros(&spec);
        for t in 0..3 {
            params.theta[t].raw = vec![0.1, 0.12 + 0.01 * t as f64, 0.15, 0.2, 0.18];
            params.beta[t] = vec![0.2 - 0.1 * t as f64, -0.3 + 0.05 * t as f64];
        }
        let layout = FreeLayout::full(&Transition::ALL, &spec.masks);
        let (ll, g, h) = prob.free_derivatives(&params, &spec.masks, &layout).unwrap();
        assert!(close(ll, prob.log_likelihood(&params, &spec.masks).unwrap(), 1e-12));
        let x0 = layout.read(&params);
        let dim = x0.len();
        let eval = |x: &[f64]| {
            let mut p = params.clone();
            layout.write(&mut p, x);
            prob.free_derivatives(&p, &spec.masks, &layout).unwrap()
        };
        let step = 1e-6;
        for a in 0..dim {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[a] += step;
            xm[a] -= step;
            let (lp, gp, _) = eval(&xp);
            let (lm, gm, _) = eval(&xm);
            let fd = (lp - lm) / (2.0 * step);
            assert!((fd - g[a]).abs() < 1e-5 * g[a].abs().max(1.0), "grad {a}: {fd} vs {}", g[a]);
            for b in 0..dim {
                let fdh = (gp[b] - gm[b]) / (2.0 * step);
                let an = h[a * dim + b];
                assert!((fdh - an).abs() < 1e-4 * an.abs().max(1.0), "hess {a},{b}: {fdh} vs {an}");
            }
        }
    }
}
