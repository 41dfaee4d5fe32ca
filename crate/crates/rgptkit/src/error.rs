//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Image has a zero-sized dimension.
    #[error("empty image: {0}")]
    EmptyImage(String),

    /// Tensor or grid dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or out-of-range region annotation.
    #[error("invalid region: {0}")]
    Region(String),

    /// Conversation or template could not be assembled.
    #[error("sequence error: {0}")]
    Sequence(String),

    /// A training batch supervises no tokens at all.
    #[error("no supervised tokens in batch")]
    NoSupervisedTokens,

    /// A gradient came back NaN or infinite; the step was not applied.
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    /// Record failed schema validation during ingestion.
    #[error("data error: {0}")]
    Data(String),

    /// Captioner backend failed after retries.
    #[error("captioner backend {name}: {message}")]
    Backend { name: String, message: String },

    /// Configuration file or override could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is missing, truncated, or has a bad magic string.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    /// Evaluation input violates protocol expectations.
    #[error("eval error: {0}")]
    Eval(String),

    /// Generation could not proceed (e.g. empty vocabulary).
    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
