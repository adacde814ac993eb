//! Seeded sweeps over synthetic worlds: pretraining, target regression and
//! exact oracle metrics per grid cell, written as CSV with fitted rate
//! slopes.

pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod slope;

pub use config::{ExperimentConfig, LambdaChoice, Metric, DEFAULT_CONFIG, SCHEMA_VERSION};
pub use error::{HarnessError, Result};
pub use report::{RateReport, Record, Summary, HEADER};
pub use run::run_experiment;
pub use slope::{fit_slope_records, Column, SlopeFit, XAxis};
