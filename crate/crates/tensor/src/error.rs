use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("concat: tensor {index} has dims {dims:?}, incompatible with {expected:?} along axis {axis}")]
    ConcatMismatch {
        index: usize,
        dims: Vec<usize>,
        expected: Vec<usize>,
        axis: usize,
    },

    #[error("{op}: invalid shape: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: dtype mismatch {lhs:?} vs {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: crate::DType,
        rhs: crate::DType,
    },

    #[error("{op}: empty sequence axis")]
    EmptySequence { op: &'static str },

    #[error("{op}: index {index} out of range for size {size} (position {position})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
        position: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tensor decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
