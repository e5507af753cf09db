use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or graph did not have the shape or connectivity an operation requires.
    #[error("structural error: {0}")]
    Structural(String),

    /// Caller-supplied data was out of range (labels, sample counts, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A value went non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized artifact could not be interpreted.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or a run could not continue.
    #[error("run error: {0}")]
    Run(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
