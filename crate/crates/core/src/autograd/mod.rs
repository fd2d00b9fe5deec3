//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Graph`] records one forward pass. Each builder method evaluates its
//! operation eagerly and appends a node carrying the backward rule, so
//! `Graph::backward` is a single reverse sweep over the node list.

mod conv;
mod elementwise;
mod gemm;
mod graph;
mod norm;
mod pool;

pub use conv::Conv2dParams;
pub use elementwise::{sigmoid, softplus};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use norm::{BatchStats, NormMode, BN_EPS, BN_MOMENTUM};

pub(crate) use gemm::{gemm, Mat};
pub(crate) use graph::{Backward, BackwardCtx};
