use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdrlError {
    /// A caller broke an operation's precondition (shapes, ranges, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// `context` is filled in by the training loop with the epoch and batch.
    #[error("non-finite {term}{context}")]
    NonFinite { term: String, context: String },

    #[error("finite-difference oracle hit a non-finite value at coordinate {index}")]
    OracleFailure { index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FdrlError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(FdrlError::Contract(msg.into()))
}

impl FdrlError {
    pub fn at_batch(self, epoch: usize, batch: usize) -> Self {
        match self {
            FdrlError::NonFinite { term, .. } => FdrlError::NonFinite {
                term,
                context: format!(" at epoch {epoch}, batch {batch}"),
            },
            other => other,
        }
    }
}
