//! Cross-domain person re-identification with shared/private latent
//! decomposition.
//!
//! The model splits convolutional features into a dataset-invariant (shared)
//! part used for retrieval and a dataset-specific (private) part that absorbs
//! domain style, trained with a four-term objective: source classification,
//! source contrastive metric learning, cross-domain feature reconstruction,
//! and an orthogonality penalty between the shared and private subspaces.
//!
//! Modules:
//! - [`config`]: model/training/loss configuration and validation
//! - [`samples`]: labeled samples, dataset splits, label masking
//! - [`rng`]: deterministic named random streams
//! - [`nn`]: differentiable layer primitives (f64, CPU)
//! - [`network`]: the six learnable components and checkpointing
//! - [`losses`]: the four loss terms, their gradients, and a
//!   finite-difference gradient verifier
//! - [`data`]: synthetic cross-domain dataset generator and directory loader
//! - [`trainer`]: batch sampling, SGD loop, ablation orchestration
//! - [`evaluator`]: embedding, cosine ranking, CMC and mAP

pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod network;
pub mod nn;
pub mod rng;
pub mod samples;
pub mod trainer;

pub use error::{ArnError, Result};
