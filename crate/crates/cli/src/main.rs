//! `vox2seg` command-line interface.
//!
//! Configuration precedence, highest first: command-line flags, the
//! `VOX2SEG_DEVICE` environment variable (for `--device`), the `--config`
//! file, built-in desk-scale defaults.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vox2seg::config::{Overrides, RunConfig, DEVICE_ENV};
use vox2seg::pipeline::{self, ModelChoice, PREDICTIONS_DIR, REPORT_FILE};
use vox2seg::postprocess::Connectivity;

#[derive(Parser)]
#[command(name = "vox2seg", version, about = "Volumetric GAN brain tumour segmentation")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, env = DEVICE_ENV)]
    device: Option<String>,
    /// Run output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Weight of the dice term in the generator objective.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct PostFlags {
    /// Whole-map ET count below which ET becomes NCR/NET.
    #[arg(long)]
    et_threshold: Option<usize>,
    /// Minimum ET cluster size; 0 disables cluster removal.
    #[arg(long)]
    min_cluster: Option<usize>,
    /// Neighbourhood for clusters: 6, 18 or 26.
    #[arg(long)]
    connectivity: Option<Connectivity>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Synth {
        #[arg(long, short = 'n')]
        subjects: usize,
        /// Edge length of the cubic grid.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long)]
        fold: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train every cross-validation fold.
    Cv {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the ensembler on the fold models.
    Ensemble,
    /// Segment a dataset or a single subject directory.
    Predict {
        /// Dataset or subject directory; defaults to data.test.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Use this fold's generator instead of the ensemble.
        #[arg(long)]
        fold: Option<usize>,
        /// Where label maps go; defaults to <out>/predictions.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[command(flatten)]
        post: PostFlags,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Dataset directory or single label file; defaults to data.test.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Prediction directory or single label file; defaults to <out>/predictions.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Report path; defaults to <out>/metrics.json.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run_config(shared: &Shared, train: &TrainFlags, post: &PostFlags) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: shared.seed,
        device: shared.device.clone(),
        output: shared.out.clone(),
        alpha: train.alpha,
        epochs: train.epochs,
        et_threshold: post.et_threshold,
        min_cluster: post.min_cluster,
        connectivity: post.connectivity,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn test_set(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| cfg.data.test.clone())
        .context("no input given and data.test is not set in the configuration")
}

fn run(cli: Cli) -> Result<()> {
    let shared = cli.shared;
    let none_t = TrainFlags::default();
    let none_p = PostFlags::default();
    match cli.command {
        Command::Synth { subjects, size } => {
            let out = shared.out.context("synth needs --out")?;
            let entries = pipeline::synth(&out, subjects, size, shared.seed.unwrap_or(0))?;
            println!("wrote {} subjects to {}", entries.len(), out.display());
        }
        Command::Train { fold, train } => {
            let cfg = run_config(&shared, &train, &none_p)?;
            let o = pipeline::run_train(&cfg, fold)?;
            println!(
                "fold {fold}: best whole-tumour dice {:.4} at epoch {}",
                o.best_dice_wt, o.best_epoch
            );
        }
        Command::Cv { train } => {
            let cfg = run_config(&shared, &train, &none_p)?;
            for f in pipeline::run_cv(&cfg)? {
                println!(
                    "fold {}: best whole-tumour dice {:.4} at epoch {}",
                    f.split.fold, f.outcome.best_dice_wt, f.outcome.best_epoch
                );
            }
        }
        Command::Ensemble => {
            let cfg = run_config(&shared, &none_t, &none_p)?;
            let o = pipeline::run_ensemble(&cfg)?;
            println!(
                "ensembler: best epoch {}, stopped at epoch {}",
                o.best_epoch, o.stopped_epoch
            );
        }
        Command::Predict {
            input,
            fold,
            pred_dir,
            post,
        } => {
            let cfg = run_config(&shared, &none_t, &post)?;
            let input = test_set(&cfg, input)?;
            let pred_dir = pred_dir.unwrap_or_else(|| cfg.output.join(PREDICTIONS_DIR));
            let choice = fold.map_or(ModelChoice::Ensemble, ModelChoice::Fold);
            let written = pipeline::run_predict(&cfg, &input, choice, &pred_dir)?;
            println!("wrote {} label maps to {}", written.len(), pred_dir.display());
        }
        Command::Evaluate {
            truth,
            pred,
            report,
        } => {
            let cfg = run_config(&shared, &none_t, &none_p)?;
            let truth = test_set(&cfg, truth)?;
            let pred = pred.unwrap_or_else(|| cfg.output.join(PREDICTIONS_DIR));
            let report = report.unwrap_or_else(|| cfg.output.join(REPORT_FILE));
            let r = pipeline::run_evaluate(&truth, &pred, &report)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
