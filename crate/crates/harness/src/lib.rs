//! Experiment driver: synthetic data, outlier injection, calibration and
//! reconstruction pipelines, sweeps and reports.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inject;
pub mod report;
pub mod rng;
pub mod state;

pub use config::{BitPair, CalibSettings, ExperimentConfig, ReconMode};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, run_specs, sweep_granularity, sweep_theta, RunSpec};
pub use report::{emit_report, Format, Report, RunRecord};
