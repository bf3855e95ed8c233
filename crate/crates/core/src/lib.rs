//! Semi-supervised node classification on subject-similarity graphs.
//!
//! The pipeline: tabular cohort → imputation and scaling ([`data`]) →
//! scaled-exponential similarity graph ([`graph`]) → graph models
//! ([`models`]) trained and evaluated over repeated random splits
//! ([`train_eval`]) → per-subject feature-mask explanations ([`explain`]) →
//! tables and SVG figures ([`report`]).

pub mod data;
pub mod explain;
pub mod graph;
pub mod models;
pub mod numerics;
pub mod report;
pub mod train_eval;

pub use numerics::{NumericsError, Tensor};
