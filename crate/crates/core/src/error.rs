use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("target distance {0} m outside [7, 18]")]
    Range(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("episode lifecycle: {0}")]
    Lifecycle(&'static str),
    #[error("training fault: {0}")]
    Training(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Range(_) => 2,
            Error::Config(_) => 3,
            Error::Integrity { .. } | Error::Data(_) | Error::Format(_) | Error::Json(_) => 4,
            Error::Training(_) => 5,
            _ => 1,
        }
    }

    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }
}
