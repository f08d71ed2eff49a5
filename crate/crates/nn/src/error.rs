use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects a tensor of rank <= 2, got {shape:?}")]
    RankTooHigh { op: &'static str, shape: Vec<usize> },
    #[error("index {index} out of bounds for extent {extent} in {op}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
