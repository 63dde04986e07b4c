//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape violations; the message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or Inf detected where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid argument or precondition failure.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration file or ModelConfig problems.
    #[error("config error: {0}")]
    Config(String),

    /// On-disk format violations (feature files, checkpoints, vocab files).
    #[error("format error: {0}")]
    Format(String),

    /// Corpus / feature count mismatches.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Decoding failures.
    #[error("decode error: {0}")]
    Decode(String),

    /// Training aborts (divergence, missing stage-1 weights, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Checkpoint version or config-hash incompatibility.
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
