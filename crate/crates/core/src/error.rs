use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum DopeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid observation count: requested {requested} of {available} grid points")]
    InvalidK { requested: usize, available: usize },

    #[error("design overlap violated at grid index {0}")]
    OverlapViolation(usize),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("oracle quantity unavailable: {0}")]
    OracleUnavailable(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DopeError>;
