//! Multi-target cross-domain recommendation.
//!
//! Three training stages share one substrate:
//!
//! 1. [`bprmf`] learns user and item embeddings independently per domain.
//! 2. [`cat`] fuses each user's per-domain embeddings into one global
//!    embedding with a contrastive masked autoencoder.
//! 3. [`art`] transfers the global embedding and the other domains'
//!    embeddings into each target domain through attention.
//!
//! [`eval`] scores every stage with all-ranking top-K metrics, [`synth`]
//! builds worlds with controlled cross-domain structure, and [`pipeline`]
//! wires everything together with checkpoints and replayable seeds.

pub mod art;
pub mod bprmf;
pub mod cat;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use nn::{DenseMatrix, MlpParams, OptimizerState};
