//! Experiment harness for projected off-policy Q-learning: configuration,
//! dataset construction, sweeps, result tables and charts.

// `!(x > y)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chart;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod table;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{LabError, LabResult};
pub use table::ResultTable;
