use std::path::PathBuf;

use dope_core::DopeError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad invocation or configuration; the CLI exits with status 1.
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    MissingFile { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] DopeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::MissingFile { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
