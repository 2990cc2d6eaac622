//! Behavioral simulator of hybrid CMOS-OxRAM deep generative models.
//!
//! OxRAM devices appear in four roles: binary bit cells of the quantized
//! synaptic matrices, per-neuron state storage, per-neuron stochastic
//! references, and the gain-setting element of the inter-layer normalizer.
//! Every device tallies its switching events so training runs can be audited
//! against endurance budgets.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod device;
pub mod dgm;
pub mod endurance;
pub mod error;
pub mod experiment;
pub mod neuron;
pub mod rbm;
pub mod synapse;

pub use error::{Error, Result};
