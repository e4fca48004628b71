//! Unsupervised shapelet discovery and shapelet-transform clustering.

pub mod candidates;
pub mod cluster;
pub mod data;
pub mod distance;
pub mod error;
pub mod losses;
pub mod nn;
pub mod pipeline;
mod rng;
pub mod shapelet;
pub mod synthetic;

pub use error::{Error, Result};
