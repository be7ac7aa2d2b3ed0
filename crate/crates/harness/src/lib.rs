//! Experiment drivers over `ctk-core`: configuration, data, reports.

pub mod config;
pub mod data;
mod error;
pub mod experiments;
pub mod report;

pub use config::{DataSource, ExperimentConfig, Task};
pub use error::{HarnessError, Result};
pub use experiments::run_experiment;
pub use report::Report;
