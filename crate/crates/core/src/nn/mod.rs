//! The trainable part: a differentiable graph, the autoencoder built on it,
//! and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod model;

pub use graph::{Gradients, Graph, Tensor, Var};
pub use model::{sgd_step, ArchConfig, Autoencoder, ParamVars};
