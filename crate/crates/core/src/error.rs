use thiserror::Error;

/// Errors raised by the sampling library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown schedule family `{0}`")]
    UnknownFamily(String),

    #[error("invalid time indices: s = {s}, t = {t} ({reason})")]
    InvalidTimes {
        s: usize,
        t: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
