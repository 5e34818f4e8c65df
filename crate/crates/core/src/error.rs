use thiserror::Error;

/// Errors raised by tensor operations and the autodiff tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("row_softmax: row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Errors raised while building or running attention layers and models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds maximum length {max_len}")]
    MaxLengthExceeded { len: usize, max_len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("encoder memory is required in enc_dec mode")]
    MissingMemory,
    #[error("{what} index {index} out of range (have {count})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        count: usize,
    },
    #[error("all target positions are padding")]
    AllPad,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
