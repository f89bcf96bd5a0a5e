//! Dense `f64` tensors, a reverse-mode tape, parameter stores and a
//! finite-difference gradient oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub mod fault;

pub use gradcheck::{finite_diff_check, relative_error, BlockError, GradCheckReport};
pub use params::{Bound, ParamId, Parameter, ParameterStore};
pub use tape::{softmax_raw, Gradients, Tape, Var};
pub use tensor::{matmul_raw, Tensor};
#[cfg(test)]
pub(crate) use tape::sigmoid;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass; reset it first")]
    StaleTape,
    #[error("var belongs to a different tape")]
    ForeignVar,
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
