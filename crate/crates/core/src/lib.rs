//! Few-shot image classification with a vision-transformer encoder and
//! prototypical-network head, trained episodically.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluator;
pub mod gradcheck;
pub mod optim;
pub mod protonet;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use scalar::Real;
pub use tensor::{Tensor, TensorError};
pub use vit::{Mode, ViTConfig, ViTParams};
