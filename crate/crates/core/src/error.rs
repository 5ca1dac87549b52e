use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IdmError>;

#[derive(Debug, Error)]
pub enum IdmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: cannot parse field `{field}` from {value:?}")]
    Parse {
        row: String,
        field: String,
        value: String,
    },

    #[error("row {row}: invalid field `{field}`: {reason}")]
    InvalidRecord {
        row: String,
        field: String,
        reason: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} is outside the spline support [{lower}, {upper}]")]
    OutsideSupport { t: f64, lower: f64, upper: f64 },

    #[error("likelihood evaluation failed for subject {id}: {reason}")]
    Evaluation { id: String, reason: String },

    #[error("internal contract violated: {0}")]
    Internal(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("singular hessian: {0}")]
    SingularHessian(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IdmError {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IdmError::Evaluation { .. }
                | IdmError::Internal(_)
                | IdmError::NonConvergence(_)
                | IdmError::SingularHessian(_)
                | IdmError::Selection(_)
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdmError::Io {
            path: path.into(),
            source,
        }
    }
}
