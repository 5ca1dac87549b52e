//! Penalized illness-death models for interval-censored semi-competing risks.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod selection;
pub mod simulation;
pub mod workflow;

pub use baseline::{BaselineFamily, BaselineSpec, ThetaBlock};
pub use data::{CovariateMatrix, Dataset, ObservationRecord};
pub use error::{IdmError, Result};
pub use model::{CovariateMasks, LikelihoodMode, ModelSpec, ParameterSet, Transition};
pub use quadrature::QuadratureRule;
