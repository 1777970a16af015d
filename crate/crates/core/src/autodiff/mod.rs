//! Dense tensors and a dynamic reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node index is a topological order and
//! [`Graph::backward`] simply walks the indices downwards. All reductions sum
//! left to right, which makes forward values bit-reproducible.

mod graph;
mod tensor;

pub use graph::{Fault, Graph, Var};
pub use tensor::Tensor;
