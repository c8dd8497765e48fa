//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{fault, CustomOp, Graph, OpKind, Var};
pub use tensor::Tensor;
