//! `gen | train | sample | eval` entry points driven by one TOML run
//! config.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::data::DataError;
use crate::engine::EngineError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::ot::OtError;

pub use artifacts::{history_csv, input_hash, metrics_csv, pgm_bytes, wilcoxon_csv, write_pgm_maps, RunManifest};
pub use commands::{cmd_eval, cmd_gen, cmd_sample, cmd_train, load_data, EvalReport, SampleReport, TrainReport};
pub use config::{DataSection, EvalSection, ModelSection, RunConfig, SampleSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. }
            | ModelError::Engine(EngineError::NonFinite { .. })
            | ModelError::Ot(OtError::Convergence { .. }) => CliError::Numeric(e.to_string()),
            ModelError::Data(d) => d.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pulaski", about = "Train, sample and evaluate multi-annotator segmentation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset.
    Gen,
    /// Train and checkpoint the configured model.
    Train {
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample segmentations for the test split.
    Sample,
    /// Score prediction directories against the test annotations.
    Eval,
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            sets.push(format!("out={}", toml::Value::String(o.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &sets)
    }
}

/// Runs a parsed command line, printing progress to stderr; returns the
/// process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = cli.run_config().and_then(|cfg| match &cli.command {
        Command::Gen => cmd_gen(&cfg).map(|d| eprintln!("dataset written to {}", d.display())),
        Command::Train { resume } => {
            let mut log = |r: &crate::model::EpochRecord| {
                eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss)
            };
            cmd_train(&cfg, resume.as_deref(), &mut log).map(|r| {
                eprintln!("checkpoint {} (best epoch {})", r.checkpoint.display(), r.best_epoch)
            })
        }
        Command::Sample => cmd_sample(&cfg).map(|r| eprintln!("{} images sampled into {}", r.images.len(), r.dir.display())),
        Command::Eval => cmd_eval(&cfg).map(|r| {
            let a = &r.annotations.kalpha_all;
            eprintln!("annotations: Kα_all {:.2} ± {:.2}", 100.0 * a.mean, 100.0 * a.sd);
            for m in &r.methods {
                eprintln!(
                    "{}: GED {:.4} ± {:.4}  Kα_all {:.2} ± {:.2}",
                    m.method,
                    m.ged.mean,
                    m.ged.sd,
                    100.0 * m.kalpha_all.mean,
                    100.0 * m.kalpha_all.sd
                );
            }
        }),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
