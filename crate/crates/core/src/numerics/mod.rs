//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use sparse::SparseMatrix;
pub use tape::{softmax_rows, Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
