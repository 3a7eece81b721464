use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    #[error("tensor data length {found} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("division by zero")]
    DivisionByZero,

    #[error("tensor does not belong to this tape")]
    TapeMismatch,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("window length {found} does not match configured window {expected}")]
    WindowLength { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("{path}: {msg}")]
    Pfm { path: String, msg: String },

    #[error("sequence load: {0}")]
    Sequence(String),

    #[error("{0}")]
    ModelFormat(String),

    #[error("no valid pixels (all ground-truth values at or below the valid threshold)")]
    NoValidPixels,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("render: degenerate range lo == hi for a non-constant frame")]
    DegenerateRange,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
