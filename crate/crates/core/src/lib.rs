//! DAUNet: a UNet variant with a compressed deformable bottleneck and
//! parameter-free SimAM attention, built on a small double-precision
//! reverse-mode autodiff engine.

pub mod autograd;
pub mod config;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod rng;
pub mod simam;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
