//! Experiment pipeline behind the `segdetect` command: synthetic data,
//! model training, attacks, uncertainty features, detectors and reports.

pub mod cli;
pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::{Outcome, Pipeline, Stage};
