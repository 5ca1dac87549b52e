//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineSpec;
use crate::error::{IdmError, Result};
use crate::model::LikelihoodMode;
use crate::optimizer::ConvergenceConfig;
use crate::quadrature::{QuadratureRule, DEFAULT_POINTS};
use crate::selection::PenaltyGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub points: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { points: DEFAULT_POINTS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    pub mode: LikelihoodMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    pub baseline: BaselineSpec,
    pub quadrature: QuadratureConfig,
    pub likelihood: LikelihoodConfig,
    /// Unset means the library defaults for fits and the simulation
    /// defaults for studies.
    pub fit: Option<ConvergenceConfig>,
    pub grid: PenaltyGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            baseline: BaselineSpec::simulation_default(),
            quadrature: QuadratureConfig::default(),
            likelihood: LikelihoodConfig::default(),
            fit: None,
            grid: PenaltyGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IdmError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(fit) = &self.fit {
            fit.validate()?;
        }
        self.grid.validate()?;
        if self.quadrature.points == 0 {
            return Err(IdmError::Config("quadrature.points must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(IdmError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fit_convergence(&self) -> ConvergenceConfig {
        self.fit.unwrap_or_default()
    }

    pub fn study_convergence(&self) -> ConvergenceConfig {
        self.fit.unwrap_or_else(ConvergenceConfig::simulation)
    }

    pub fn quadrature_rule(&self) -> Result<QuadratureRule> {
        QuadratureRule::gauss_legendre(self.quadrature.points)
    }
}
