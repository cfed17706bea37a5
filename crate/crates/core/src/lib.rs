//! Two-stage debiasing for relationship (predicate) classification.
//!
//! Stage 1 builds geometric relationship populations from box annotations and
//! trains a classifier with the population loss, which penalizes confusable
//! high-frequency neighbours of each class. Stage 2 fits a sparse `K x beta`
//! matrix of multiplicative factors on augmented logits, one per
//! (class, rank) cell, by counting the lower/upper bounds each sample imposes
//! on the factor and sweeping for the value that satisfies the most.
//!
//! Everything runs on small JSON-lines artifacts so that each stage can be
//! driven from the `tscm` binary or called directly.

pub mod adjustment;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod ploss;
pub mod populations;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    AdjustmentMatrix, BoundingBox, Dataset, FeatureRow, FrequencyVector, ImageRecord, LogitRecord, ObjectInstance,
    PopulationTable, PredictionRow, TripletInstance,
};

/// Crate version, embedded in artifact headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
