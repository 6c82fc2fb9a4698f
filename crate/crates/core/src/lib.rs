//! Toolkit for patching a contrastive dual encoder by weight interpolation
//! and aligning an extra image modality into its embedding space.

pub mod autodiff;
pub mod checkpoint;
pub mod encoders;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, NodeId};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::Tensor;
