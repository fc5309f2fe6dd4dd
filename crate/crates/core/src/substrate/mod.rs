//! Dense `f32` tensors and a reverse-mode differentiation tape.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub(crate) use gemm::{gemm, MatRef};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, LeafReport};
pub use graph::{gelu, CustomOp, Gradients, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softmax_in_place;
pub use tensor::Tensor;
