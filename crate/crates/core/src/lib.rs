//! dfqlab: a desk-scale laboratory for data-free post-training quantization.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, symmetric eigensolver, Gaussian feature statistics,
//!   seeded random streams and the binary tensor file format.
//! - [`prompts`]: class vocabulary, prompt strategies (single-class, mixup-class,
//!   n-class, hypernym/definition/background variants) and JSON Lines manifests.
//! - [`world`]: a procedural image universe standing in for real training data and a
//!   text-conditioned generator, plus pixel-level augmentation baselines.
//! - [`model`]: a small CNN with exact manual backpropagation, used both as the model
//!   under quantization and as the feature extractor for FID.
//! - [`quant`]: blockwise PTQ with soft rounding, learnable scales and gradient-norm traces.
//! - [`diagnostics`]: FID, RPC-FID, empirical generalization gap, gradient-norm bound
//!   proxy, embedding export.
//! - [`experiment`]: configuration and the strategy comparison runner.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod prompts;
pub mod quant;
pub mod world;

pub use error::{Error, Result};
