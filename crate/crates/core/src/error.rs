use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("numerical blowup: {0}")]
    NumericalBlowup(String),

    #[error("corrupt dataset {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(field: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            field: field.to_string(),
            expected,
            found,
        })
    }
}
