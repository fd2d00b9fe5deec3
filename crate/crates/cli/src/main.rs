//! `daunet` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daunet::config::keys_help;

#[derive(Parser, Debug)]
#[command(name = "daunet", version, about = "Synthetic-phantom DAUNet experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
#[command(after_help = keys_help())]
pub struct Common {
    /// JSON config file (keys below; absent keys take profile defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base profile the config is applied on top of.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    pub profile: String,
    /// Dotted `key=value` override, applied after the config file and
    /// DAUNET_SEED. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: ./runs/<timestamp>].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write phantom images and class masks as PGM.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Samples exported per split.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Train one model; writes manifest.json, log.csv and best.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a split; writes metrics.csv and mask PGMs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Samples whose predicted and true label maps are exported.
        #[arg(long, default_value_t = 4)]
        export_masks: usize,
    },
    /// Train all four component combinations; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Quadrant-occlusion comparison of two checkpoints; writes
    /// robustness.csv and offset heatmaps.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        daunet: PathBuf,
        #[arg(long)]
        unet: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Bottleneck offsets of one test sample as CSV and PGM heatmap.
    ExportOffsets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position within the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Print the resolved config, parameter counts and architecture.
    Info {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `daunet help` for usage.");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
