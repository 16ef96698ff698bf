//! Multi-domain masked pre-training for heterogeneous time series.
//!
//! Series from different domains (each with its own variate catalogue) are
//! tokenised into patch tokens, partially masked, encoded, and reconstructed
//! by a light decoder. The crate covers ingestion, tokenisation, masking,
//! the encoder/decoder model, losses, training, fine-tuning heads and the
//! embedding analysis used to inspect learned domain signatures.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod losses;
pub mod masking;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod params;
pub mod tokeniser;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
