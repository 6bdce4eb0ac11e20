//! Desk-scale flow-matching laboratory.
//!
//! Implements local Gaussian noise coupling (LGNC) and a content consistency
//! loss (CCL) next to the standard flow-matching baselines (independent
//! coupling, minibatch optimal transport, rectified-flow reflow), together
//! with a curriculum training loop, fixed-step Euler sampling, synthetic
//! edit tasks, and benchmark score aggregation.

pub mod config;
pub mod coupling;
pub mod editlab;
pub mod error;
pub mod experiments;
pub mod flowloss;
pub mod manifest;
pub mod numcore;
pub mod rng;
pub mod sampler;
pub mod scorebench;
pub mod trainer;

pub use error::{Error, Result};
