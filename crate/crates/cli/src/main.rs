//! `mgalign`: generate synthetic datasets, train, evaluate, run ablations.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 i/o, 4 stale
//! dataset, 5 checkpoint.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgalign_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mgalign", version, about)]
struct Cli {
    /// Root directory for datasets, runs and reports.
    #[arg(long, global = true, env = "MGALIGN_OUTPUT_ROOT", default_value = "out")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; may name a base preset with `preset = "..."`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base preset: tiny, desk or paper-shaped.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key by dotted path, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.stage1_fraction=X`.
    #[arg(long, value_name = "X")]
    stage1_fraction: Option<f64>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Shorthand for `--set train.seed=S --set model.init_seed=S`.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Shorthand for `--set run_id=ID`.
    #[arg(long, value_name = "ID")]
    run_id: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic dataset and write it to disk.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (default: <output-root>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (default: <output-root>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run directory (default: <output-root>/runs/<run_id>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the newest complete epoch checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch, leaving a resumable run behind.
        #[arg(long, value_name = "EPOCH")]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        /// Dataset directory (default: <output-root>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Optional run config; its model section must match the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an ablation matrix and write a report.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Worker threads for independent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Report directory (default: <output-root>/ablation/<run_id>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor manifest.
    InspectCheckpoint { checkpoint: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                Error::Io { .. } => 3,
                Error::StaleDataset(_) => 4,
                Error::Checkpoint(_) => 5,
                Error::Json(_) | Error::DegenerateInput(_) | Error::Divergence { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
