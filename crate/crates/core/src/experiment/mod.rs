//! Experiment configuration, runs, sweeps and reports.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Mode};
pub use runner::*;
