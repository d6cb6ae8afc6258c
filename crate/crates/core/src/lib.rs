//! Ordinal regression forests with grouped feature selection and
//! meta-learned tree weights.
//!
//! The crate provides a small dense backbone, soft decision trees with
//! ordinal leaves, the tree-wise weighting network and the bilevel
//! training loop, along with data handling, metrics and the `morf` CLI.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod forest;
pub mod gfs;
pub mod isotonic;
pub mod meta;
pub mod metrics;
pub mod ordinal;
pub mod params;
pub mod twwnet;

pub use error::{MorfError, Result};
