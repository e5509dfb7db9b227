//! Concrete autoencoder feature selection: a differentiable selector layer
//! picks k of d input features by annealing relaxed one-hot distributions,
//! while a decoder learns to reconstruct (or classify) from the selection.
//!
//! Module map:
//! - [`numcore`]: row-major matrices, the seeded RNG, softmax, sampling.
//! - [`nn`]: dense layers, losses, Adam, finite-difference gradient checks.
//! - [`selector`]: the concrete selector layer and its annealing schedule.
//! - [`cae`]: the training loop, feature selection, imputation, ablation.
//! - [`dataio`]: CSV/IDX loading, splits, normalization, model files.
//! - [`eval`]: reconstruction metrics, decoder refits, PCA bound, probe.

pub mod cae;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod nn;
pub mod numcore;
pub mod selector;

pub use error::{CaeError, Result};
