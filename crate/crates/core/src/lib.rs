//! Regression trees, bagged forests and gradient-boosting machines built from
//! first principles, plus the machinery to drive them along separate
//! complexity axes (learner capacity and ensemble size) and watch how test
//! error responds.
//!
//! The crate is organised bottom-up:
//!
//! - [`rng`] and [`dataset`]: deterministic randomness, the [`Dataset`]
//!   container, the train/test split protocol and the MSE metric.
//! - [`synthgen`]: the Friedman #1 style synthetic benchmark.
//! - [`vcf_ingest`]: single-sample VCF parsing, quality control and genotype
//!   feature matrices.
//! - [`cart`]: best-first CART regression trees with an exact leaf budget.
//! - [`ensembles`]: bagged forests, gradient boosting and averaged GBMs.
//! - [`sweep`]: declarative complexity regimes, replicated execution and
//!   interpolation-threshold detection.
//! - [`report`]: curve CSVs, SVG plots and curve-shape classification.

pub mod cart;
pub mod dataset;
pub mod ensembles;
mod error;
mod numeric;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod synthgen;
pub mod vcf_ingest;

pub use dataset::{mse, split_dataset, Dataset, SplitIndices};
pub use error::{Error, Result};
pub use rng::{derive_stream, RngStream};
