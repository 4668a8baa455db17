use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or validating annotated data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sentence `{id}`: span mismatch: {detail}")]
    SpanMismatch { id: String, detail: String },
    #[error("sentence `{id}`: invalid record: {}", violations.join("; "))]
    InvalidRecord { id: String, violations: Vec<String> },
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("schema: {0}")]
    Schema(String),
}

/// Failures raised by a model backend, mock or plugin.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{backend}: {message}")]
    Failed { backend: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn failed(backend: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError::Failed {
            backend: backend.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("generator coverage {coverage:.4} still at or below {threshold} after {epochs} epochs")]
    CoverageNotReached {
        coverage: f64,
        threshold: f64,
        epochs: usize,
    },
    #[error("policy data needs both classes (retain: {positives}, remove: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("missing state: {}", .0.display())]
    MissingState(PathBuf),
    #[error("config does not match the stored run config: {0}")]
    ConfigMismatch(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
