use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator, agent and twin subsystems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("replay buffer underfull: occupancy {occupancy} < batch {batch}")]
    BufferUnderfull { occupancy: usize, batch: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
