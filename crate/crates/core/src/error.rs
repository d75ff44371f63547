use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("union over an empty set of distances")]
    EmptyUnion,

    #[error("length mismatch in {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("backward called on a tape without a recorded forward pass")]
    EmptyTape,

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("operation requires the {expected} variant")]
    WrongVariant { expected: &'static str },

    #[error("no tube detected: {0}")]
    NoDetection(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
