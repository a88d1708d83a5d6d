//! Next-scale autoregressive depth estimation at desk scale.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod var;
pub mod vq;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::{AttentionMask, Gradients, Graph, Tensor, Var};
