//! Local dense tensors, kernels and the reverse-mode tape.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Backend, Eager, Op, OpKind, Tape, Var};
pub use tensor::{numel, row_major_strides, DType, Data, ReduceOp, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("unknown dtype `{0}`")]
    UnknownDType(String),
    #[error("buffer of {len} elements does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("{op} does not support dtype {dtype}")]
    Unsupported { op: &'static str, dtype: DType },
    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: dtype mismatch {lhs} vs {rhs}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op} expects {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("{0} has no local kernel")]
    NoKernel(&'static str),
}
