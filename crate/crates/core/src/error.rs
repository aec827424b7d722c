use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {requested} objects requested but the grid has only {cells} cells")]
    Capacity { requested: usize, cells: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown vocabulary item `{0}`")]
    Vocabulary(String),

    #[error("malformed image tokens: {0}")]
    ImageTokens(String),

    #[error("response is not grounded in the scene ({errors} factual errors)")]
    Ungrounded { errors: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("incompatible {what}: expected format version {expected}, found {found}")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("corrupt {what}: {reason}")]
    Corrupt { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
