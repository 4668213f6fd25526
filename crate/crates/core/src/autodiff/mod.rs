//! Dense-tensor computation graph with reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
