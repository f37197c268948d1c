//! Dense tensors with a reverse-mode differentiation tape.

mod array;
mod gradcheck;
mod kernels;
mod ops;
mod scalar;
mod tape;

pub use array::Tensor;
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use ops::{BatchNormMode, OpKind};
pub use scalar::{gemm, DType, MatRef, Scalar};
pub use tape::{Tape, Var};
