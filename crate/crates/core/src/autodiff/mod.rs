//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are symbolic: ops are appended to a [`Graph`] with shapes checked on
//! construction, then evaluated against a set of input [`Bindings`].
//! [`Graph::gradient`] emits the backward pass as further graph nodes, which
//! makes gradients of gradient expressions available (double backprop).

mod adam;
mod graph;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamState};
pub use graph::{sigmoid, softplus, Bindings, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node #{node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node #{node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input node #{node} has no bound value")]
    UnboundInput { node: usize },
    #[error("gradient target #{node} is not a scalar (shape {shape:?})")]
    NonScalarTarget { node: usize, shape: Vec<usize> },
    #[error("node #{0} does not exist")]
    UnknownNode(usize),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
