//! Functional principal component representations of sparse, irregularly
//! sampled multivariate trajectories, with robust covariate-augmented
//! segmentation and calibrated, multiplicity-controlled anomaly detection.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`dataset`]: ingest time-stamped records and static covariates.
//! 2. [`embed`]: turn raw texts into score vectors via prompted chat completions.
//! 3. [`ufpca`]: per-dimension sparse FPCA (smoothing, eigendecomposition, PACE).
//! 4. [`mfpca`]: multivariate FPCA from stacked univariate scores.
//! 5. [`segment`]: whitened features, trimmed k-means, cluster-specific refits.
//! 6. [`anomaly`]: split-sample screening/confirmation and window localisation.
//! 7. [`profile`]: intent profiling of anomalous records.
//! 8. [`sim`]: subsampling robustness study and rank-test battery.

// numerical code: indexed loops mirror the formulas
#![allow(clippy::needless_range_loop)]

pub mod anomaly;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod export;
pub mod grid;
pub mod linalg;
pub mod mfpca;
pub mod profile;
pub mod ranktest;
pub mod segment;
pub mod sim;
pub mod smooth;
pub mod synthetic;
pub mod ufpca;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
