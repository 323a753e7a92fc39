//! Remaining-useful-life prediction by comparing latent Markov priors.
//!
//! Sensor windows are encoded by a Transformer encoder into a short sequence
//! of vectors, snapped to a learned codebook, and the resulting state
//! sequences are summarised per system as the steady state of an
//! exponentially smoothed transition matrix. A test system's RUL is the mean
//! RUL of the training priors closest to it in Jensen-Shannon divergence.
//!
//! Pipeline: [`ingest`] → [`model`] (built on [`nn`] and [`vq`]) →
//! [`prior`] → [`similarity`] → [`metrics`]. [`pipeline`] and [`cli`] wire the stages
//! together behind the `latent-rul` binary.

pub mod cli;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod vq;

pub use error::{Error, Result};

/// Version stamped into every artifact this crate writes.
pub const FORMAT_VERSION: u32 = 1;
