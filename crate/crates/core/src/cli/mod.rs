//! Command-line front end: argument parsing, config resolution and the
//! per-stage commands.

mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::RunConfig;

use crate::classify::ClassifyError;
use crate::inference::InferenceError;
use crate::metrics::MetricsError;
use crate::nets::NetsError;
use crate::phantom::PhantomError;
use crate::pose::PoseError;
use crate::training::TrainError;
use crate::volio::VolumeError;

/// Name of the effective-config echo written into every run directory.
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// Attaches the file a failure relates to.
    pub(crate) fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "embryoseg",
    version,
    about = "Embryo volume segmentation and mutant classification"
)]
pub struct Cli {
    /// `key = value` config file; paths inside it are relative to the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the `workers` key.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Run directory for every output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Localizer,
    BvSeg,
    BodySeg,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferStage {
    Bv,
    Body,
    Classify,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a synthetic phantom dataset with a manifest.
    Phantom,
    /// Trains one model and writes its checkpoint and loss log.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
    },
    /// Runs a trained model over the manifest cases.
    Infer {
        #[arg(long, value_enum)]
        stage: InferStage,
    },
    /// Rotates ventricle masks into their canonical pose.
    Canonicalize,
    /// Scores predicted masks or labels against the manifest.
    Evaluate,
    /// Stratified k-fold cross validation of the mutant classifier.
    Crossval,
    /// Thresholded gradient saliency of the classifier for each mask.
    Saliency,
}

impl Cli {
    /// Effective configuration: file (or defaults), then `--set`, then the
    /// dedicated flags.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::defaults(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(w) = self.workers {
            cfg.set("workers", &w.to_string())?;
        }
        Ok(cfg)
    }
}

/// Resolves the config, echoes it into the run directory and runs the
/// command on a pool of `workers` threads.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Config("--out DIR is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::at(&out, e))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_text()).map_err(|e| CliError::at(&echo, e))?;

    let workers = cfg.usize("workers")?;
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Phantom => commands::phantom(&cfg, &out),
        Command::Train { stage } => commands::train(&cfg, &out, stage),
        Command::Infer { stage } => commands::infer(&cfg, &out, stage),
        Command::Canonicalize => commands::canonicalize(&cfg, &out),
        Command::Evaluate => commands::evaluate(&cfg, &out),
        Command::Crossval => commands::crossval(&cfg, &out),
        Command::Saliency => commands::saliency(&cfg, &out),
    })
}
