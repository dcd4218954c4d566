//! Command-line front end shared by the `segdetect` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{json_argument, ExperimentConfig};
use crate::pipeline::{Pipeline, Stage};

/// Adversarial-example detection for semantic segmentation on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "segdetect", version)]
pub struct Cli {
    /// JSON experiment configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed from which every component seed is derived.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Inline JSON object or path to one, merged over the configuration.
    #[arg(long, global = true)]
    pub stage_overrides: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    GenData,
    TrainModel,
    Gradcheck,
    Attack,
    ExtractFeatures,
    TrainDetector,
    Detect,
    Evaluate,
    Report,
    RunAll,
}

impl Command {
    pub fn stage(self) -> Stage {
        match self {
            Command::GenData => Stage::GenData,
            Command::TrainModel => Stage::TrainModel,
            Command::Gradcheck => Stage::Gradcheck,
            Command::Attack => Stage::Attack,
            Command::ExtractFeatures => Stage::ExtractFeatures,
            Command::TrainDetector => Stage::TrainDetector,
            Command::Detect => Stage::Detect,
            Command::Evaluate => Stage::Evaluate,
            Command::Report | Command::RunAll => Stage::Report,
        }
    }
}

impl Cli {
    /// Defaults, then `--config`, `--stage-overrides`, `--seed` and `--out`.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            layers.push(ExperimentConfig::load(path)?);
        }
        if let Some(raw) = &self.stage_overrides {
            layers.push(json_argument(raw)?);
        }
        if let Some(seed) = self.seed {
            layers.push(json!({ "seed": seed }));
        }
        if let Some(out) = &self.out {
            layers.push(json!({ "out": out }));
        }
        ExperimentConfig::from_layers(layers)
    }

    /// Runs the selected stage and its prerequisites; returns the pipeline.
    pub fn execute(&self) -> Result<Pipeline> {
        let pipeline = Pipeline::new(&self.experiment()?)?;
        pipeline.run(self.command.stage())?;
        Ok(pipeline)
    }
}

/// Parses `args` (program name first) and executes the command.
pub fn run<I, T>(args: I) -> Result<Pipeline>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args)?.execute()
}
