use thiserror::Error;

/// Errors raised by model construction, detection state machines and the
/// experiment harness.
///
/// The variants are grouped so the command line tool can map them onto its
/// exit codes: invalid parameters are usage errors, malformed or inconsistent
/// inputs are data errors and failed numerics (non-SPD covariances that resist
/// regularization, non-converging quantile searches) are numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty model: no mixture components")]
    EmptyModel,

    #[error("model is not classifier-enabled: call fit_conclusions first")]
    NotClassifier,

    #[error("unknown cluster id {0}")]
    UnknownCluster(u32),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
