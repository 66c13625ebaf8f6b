use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Extents that do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid model, training or data configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed file contents (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),
    /// A metric that has no definition for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
