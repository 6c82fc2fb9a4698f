//! Reverse-mode automatic differentiation over a fixed primitive set.

mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, LeafKind, NodeId, LAYER_NORM_EPS};
