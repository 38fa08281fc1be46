//! Command-line front end: one binary, one subcommand per pipeline stage.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, OUT_ENV};
use segforge::Result;

#[derive(Debug, Parser)]
#[command(name = "segforge", version, about = "Semantic segmentation of SAR imagery: train, evaluate and predict")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images/ and masks/) to the output directory.
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Shape grid cell in pixels.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Print per-class pixel statistics and normalization statistics.
    Stats,
    /// Train a model; writes checkpoints, logs and the resolved configuration.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (the schedule still spans --epochs).
        #[arg(long)]
        stop_at_epoch: Option<usize>,
    },
    /// Score a checkpoint on a labelled dataset.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also write predicted masks to <out>/masks.
        #[arg(long)]
        save_masks: bool,
    },
    /// Predict palette masks for images.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
    },
    /// k-fold cross-validation on the dataset root.
    CrossValidate {
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Finite-difference gradient checks of every operator and a reduced model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Skip blocks, ASPP and the model.
        #[arg(long)]
        ops_only: bool,
    },
    /// Parameter counts and layer shapes for the configured model.
    Summary {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
}

fn init_threads(cfg: &RunConfig) {
    let threads = if cfg.deterministic { Some(1) } else { cfg.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let o = &cli.overrides;
    let explicit_model = o.config.is_some() || o.encoder.is_some() || o.decoder.is_some();
    let cfg = RunConfig::resolve(o, env_out)?;
    init_threads(&cfg);
    segforge::tensor::set_finite_checks(o.check_finite);
    match cli.command {
        Command::Synth { n, height, width, cell } => commands::synth(&cfg, n, height, width, cell),
        Command::Stats => commands::stats(&cfg),
        Command::Train { resume, stop_at_epoch } => commands::train(&cfg, resume.as_deref(), stop_at_epoch),
        Command::Evaluate { checkpoint, save_masks } => {
            commands::evaluate(&cfg, &checkpoint, save_masks, explicit_model)
        }
        Command::Predict { checkpoint, images } => commands::predict(&cfg, &checkpoint, &images, explicit_model),
        Command::CrossValidate { folds } => commands::cross_validate(&cfg, folds.unwrap_or(cfg.data.folds)),
        Command::Gradcheck { instances, ops_only } => commands::gradcheck(&cfg, instances, !ops_only),
        Command::Summary { height, width } => commands::summary(&cfg, height, width),
    }
}
