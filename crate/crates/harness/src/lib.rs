//! Experiment harness: configuration, datasets, training, checkpoints,
//! protocols and result files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod experiments;
pub mod plot;
pub mod report;
pub mod train;

pub use error::{HarnessError, Result};
