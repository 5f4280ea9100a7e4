//! Std companion to `resq-core`: IDX datasets, the checkpoint container,
//! run configuration, parallel evaluation and the staged pipeline.

// `!(x > 0.0)` style checks deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod container;
pub mod error;
pub mod idx;
pub mod parallel;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
