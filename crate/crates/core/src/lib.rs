//! Imputation of entirely missing ROI measurement columns with a
//! demographic-aware graph neural network.
//!
//! A model is trained on a cohort that has both the shared measurements
//! (`X^O`) and the target measurements (`X^M`) of every brain region, then
//! applied to a cohort that only has the shared ones. Regions form a fixed
//! adjacency graph; each subject is one graph with per-region features.
//!
//! Module map:
//! - [`math`]: matrices, reverse-mode tape, Adam.
//! - [`graph`]: ROI adjacency graph and its text format.
//! - [`layers`]: dense, batch norm, GIN, GCN, pooling.
//! - [`model`]: the DAGI network, training, checkpoints.
//! - [`baselines`]: linear and MLP regressors.
//! - [`metrics`]: error scores, cross-validation folds, statistical tests.
//! - [`datagen`]: seeded synthetic cohorts.
//! - [`dataio`]: CSV datasets, schemas, confound normalization.
//! - [`explain`]: edge-mask explanations and embedding export.
//! - [`eval`]: cross-validated benchmark and downstream classification.

pub mod baselines;
pub mod cli;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod explain;
pub mod graph;
pub mod layers;
pub mod math;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
