//! Slot-attention autoencoders with loss-based bottleneck regularizers.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod config;
pub mod model;
pub mod optim;
pub mod probe;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensorfile;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
