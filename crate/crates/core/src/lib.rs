//! Mixture-of-experts language models whose experts come in pairs of
//! different widths with a fixed combined size.
//!
//! The crate bundles a small reverse-mode autodiff engine, the MoE layer and
//! its balance loss, a toy transformer trainer, expert placement over
//! logical devices, and routing-trace analytics.

pub mod analytics;
pub mod autodiff;
pub mod balance;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod placement;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
