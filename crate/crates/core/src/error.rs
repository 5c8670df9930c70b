use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the registration pipeline.
#[derive(Debug, Error)]
pub enum SomaError {
    /// Tensor or field shapes that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument outside its valid domain (non-finite theta, bad level pair, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Inconsistent or incomplete run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Metric inputs with nothing to measure (empty mask, no records).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss term evaluated to NaN or infinity during training.
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    /// A dataset tile, checkpoint or field file that could not be read.
    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl SomaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SomaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        SomaError::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SomaError>;
