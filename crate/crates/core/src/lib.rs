//! Unsupervised detection of auto-leveling bot farms.
//!
//! The pipeline turns level-up logs into per-character interval sequences,
//! embeds them with a learned representation model, density-clusters the
//! embeddings, and double-checks each cluster with a verifier before anything
//! reaches a human moderator.

pub mod chart;
pub mod cluster;
pub mod embed;
pub mod error;
pub mod ingest;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod quality;
pub mod risk;
pub mod rng;
pub mod store;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use model::*;
