//! Concept discovery on the hidden activations of frozen classifiers.
//!
//! The pipeline runs: generate or load data ([`datagen`]), train a target
//! classifier and split it into an encoder and a head ([`targets`]), fit a
//! concept bottleneck surrogate ([`conceptnet`], [`losses`], [`trainer`]),
//! then score it ([`metrics`], [`attribution`]). [`baselines`] supplies
//! clustering-based concept sets scored through the same path.

pub mod attribution;
pub mod baselines;
pub mod checkpoint;
pub mod conceptnet;
pub mod datagen;
mod error;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
