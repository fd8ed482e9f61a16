//! Dense tensors, reverse-mode autodiff, AdamW and gradient checking.

mod adamw;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod scalar;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{central_differences, compare, grad_check, grad_check_with, rel_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYERNORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;
