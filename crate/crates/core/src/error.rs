use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent configuration or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid data handed to an operation.
    #[error("input error: {0}")]
    Input(String),
    /// A broken internal invariant (e.g. cached activations of the wrong shape).
    #[error("internal error: {0}")]
    Internal(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    /// A detector could not be fitted to the given data.
    #[error("detector training error: {0}")]
    Detector(String),
    #[error("attack error: {0}")]
    Attack(String),
    #[error("{solver} did not converge after {iterations} iterations")]
    NotConverged { solver: &'static str, iterations: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
