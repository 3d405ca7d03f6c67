//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

pub mod checkpoint;
mod finite_diff;
mod graph;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_grad, finite_diff_grad_for, max_relative_error};
pub use graph::{Graph, LeafFault, Unary, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

