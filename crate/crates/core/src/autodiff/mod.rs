//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod ops;

pub use gradcheck::{grad_check, grad_check_many, grad_check_sampled, MAX_STEP};
pub use graph::{Gradients, Graph, Var};
