use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action id {0}")]
    InvalidAction(usize),

    #[error("episode already finished; reset before stepping")]
    EpisodeDone,

    #[error("no solvable {kind} layout after {attempts} attempts (seed {seed})")]
    Unsolvable {
        kind: &'static str,
        seed: u64,
        attempts: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("empty episode")]
    EmptyEpisode,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing evaluation: {0}")]
    MissingEvaluation(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by diverging numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
