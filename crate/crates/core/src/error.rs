use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument or configuration value is outside its domain.
    #[error("invalid input: {0}")]
    Validation(String),

    /// An operation was called out of order.
    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Binary file with the wrong magic number or dimensions.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("oracle failed: {0}")]
    Oracle(#[from] crate::active::OracleError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
