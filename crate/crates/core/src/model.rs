//! Transitions, model specification and parameter containers.

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineSpec, ThetaBlock};
use crate::error::{IdmError, Result};

/// One of the three illness-death transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    /// healthy -> ill
    #[serde(rename = "01")]
    HealthyIll,
    /// healthy -> dead
    #[serde(rename = "02")]
    HealthyDead,
    /// ill -> dead
    #[serde(rename = "12")]
    IllDead,
}

impl Transition {
    pub const ALL: [Transition; 3] = [Transition::HealthyIll, Transition::HealthyDead, Transition::IllDead];

    pub fn index(self) -> usize {
        match self {
            Transition::HealthyIll => 0,
            Transition::HealthyDead => 1,
            Transition::IllDead => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Transition::HealthyIll => "01",
            Transition::HealthyDead => "02",
            Transition::IllDead => "12",
        }
    }

    pub fn from_index(i: usize) -> Transition {
        Transition::ALL[i]
    }

    pub fn parse(s: &str) -> Result<Transition> {
        match s {
            "01" | "0->1" => Ok(Transition::HealthyIll),
            "02" | "0->2" => Ok(Transition::HealthyDead),
            "12" | "1->2" => Ok(Transition::IllDead),
            _ => Err(IdmError::InvalidInput(format!("unknown transition `{s}`"))),
        }
    }
}

impl std::fmt::Display for Transition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which likelihood a dataset is fitted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodMode {
    /// Interval-censored illness onset.
    #[default]
    Interval,
    /// Illness onset times known exactly.
    Exact,
    /// Two-transition competing-risks model on imputed event times.
    Phm,
}

impl LikelihoodMode {
    pub fn transitions(self) -> &'static [Transition] {
        match self {
            LikelihoodMode::Phm => &Transition::ALL[..2],
            _ => &Transition::ALL,
        }
    }
}

/// Covariate indices entering each transition, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CovariateMasks {
    pub masks: [Vec<usize>; 3],
}

impl CovariateMasks {
    pub fn all(p: usize, transitions: &[Transition]) -> Self {
        let mut masks: [Vec<usize>; 3] = Default::default();
        for tr in transitions {
            masks[tr.index()] = (0..p).collect();
        }
        Self { masks }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn only(p: usize, tr: Transition) -> Self {
        Self::all(p, &[tr])
    }

    pub fn get(&self, tr: Transition) -> &[usize] {
        &self.masks[tr.index()]
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        for (t, mask) in self.masks.iter().enumerate() {
            if mask.windows(2).any(|w| w[0] >= w[1]) {
                return Err(IdmError::InvalidInput(format!(
                    "mask for transition {} is not strictly ascending",
                    Transition::from_index(t)
                )));
            }
            if let Some(&j) = mask.iter().find(|&&j| j >= p) {
                return Err(IdmError::InvalidInput(format!(
                    "mask for transition {} references covariate {j} but p = {p}",
                    Transition::from_index(t)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub baseline: BaselineSpec,
    pub masks: CovariateMasks,
    pub mode: LikelihoodMode,
}

impl ModelSpec {
    pub fn new(baseline: BaselineSpec, masks: CovariateMasks, mode: LikelihoodMode) -> Self {
        Self { baseline, masks, mode }
    }

    pub fn transitions(&self) -> &'static [Transition] {
        self.mode.transitions()
    }

    pub fn with_masks(&self, masks: CovariateMasks) -> Self {
        Self {
            baseline: self.baseline.clone(),
            masks,
            mode: self.mode,
        }
    }
}

/// Baseline and regression parameters for all three transitions. `beta[t]` is
/// aligned with `masks.masks[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub theta: [ThetaBlock; 3],
    pub beta: [Vec<f64>; 3],
}

impl ParameterSet {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let k = spec.baseline.n_params();
        let theta = Transition::ALL.map(|tr| ThetaBlock::new(tr, vec![0.0; k]));
        let beta = [0, 1, 2].map(|t| vec![0.0; spec.masks.masks[t].len()]);
        Self { theta, beta }
    }

    pub fn theta(&self, tr: Transition) -> &ThetaBlock {
        &self.theta[tr.index()]
    }

    pub fn beta(&self, tr: Transition) -> &[f64] {
        &self.beta[tr.index()]
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let k = spec.baseline.n_params();
        for tr in Transition::ALL {
            let t = tr.index();
            if self.theta[t].raw.len() != k {
                return Err(IdmError::InvalidInput(format!(
                    "theta block {tr} has {} entries, baseline needs {k}",
                    self.theta[t].raw.len()
                )));
            }
            if self.beta[t].len() != spec.masks.masks[t].len() {
                return Err(IdmError::InvalidInput(format!(
                    "beta block {tr} has {} entries, mask has {}",
                    self.beta[t].len(),
                    spec.masks.masks[t].len()
                )));
            }
            let all_finite = self.theta[t].raw.iter().chain(&self.beta[t]).all(|v| v.is_finite());
            if !all_finite {
                return Err(IdmError::InvalidInput(format!("non-finite parameter on {tr}")));
            }
        }
        Ok(())
    }

    /// Linear predictor `beta_tr . z` restricted to the transition's mask.
    pub fn linear_predictor(&self, masks: &CovariateMasks, tr: Transition, z: &[f64]) -> f64 {
        masks
            .get(tr)
            .iter()
            .zip(self.beta(tr))
            .map(|(&j, b)| b * z[j])
            .sum()
    }

    /// Coefficients expanded to length `p` per transition (zeros outside masks).
    pub fn dense_beta(&self, masks: &CovariateMasks, p: usize) -> [Vec<f64>; 3] {
        [0, 1, 2].map(|t| {
            let mut out = vec![0.0; p];
            for (&j, &b) in masks.masks[t].iter().zip(&self.beta[t]) {
                out[j] = b;
            }
            out
        })
    }

    /// Re-expresses these parameters under another mask, keeping the
    /// coefficients of covariates present in both and zero-filling the rest.
    pub fn remap(&self, from: &CovariateMasks, to: &CovariateMasks, p: usize) -> ParameterSet {
        let dense = self.dense_beta(from, p);
        let beta = [0, 1, 2].map(|t| to.masks[t].iter().map(|&j| dense[t][j]).collect());
        ParameterSet {
            theta: self.theta.clone(),
            beta,
        }
    }

    pub fn theta_distance_sq(&self, other: &ParameterSet) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .flat_map(|(a, b)| a.raw.iter().zip(&b.raw))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }

    pub fn beta_distance_sq(&self, other: &ParameterSet) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }
}
