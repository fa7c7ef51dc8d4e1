//! Desk-scale trainable sparsifying autoencoder.

mod checkpoint;
pub mod layers;
mod model;
mod train;

pub use checkpoint::*;
pub use layers::Tensor;
pub use model::*;
pub use train::*;
