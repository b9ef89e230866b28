//! Crate-wide error type.
//!
//! Domain and I/O failures are surfaced as [`Error`]; violations of internal
//! engine contracts (recording in inference mode, mismatched hook shapes)
//! panic instead, since they indicate caller bugs rather than bad input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("position discontinuity: chunk starts at {got}, cache ends at {expected}")]
    PositionDiscontinuity { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyData(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
