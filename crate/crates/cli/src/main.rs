//! `povmap`: command-line front end for building poverty maps.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use povmap::gbrt::TargetMode;
use povmap::groundtruth::RelocationMode;
use povmap::pipeline::{RecencyMode, WeightScheme};

use crate::config::{parse_recency, parse_relocation, parse_target_mode, parse_weights};

#[derive(Parser, Debug)]
#[command(name = "povmap", version, about = "Wealth maps from survey ground truth and open geodata")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "POVMAP_WORKERS")]
    workers: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dataset bundle and summarize its layers.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Household wealth index and per-cluster mean and spread.
    Iwi {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match displaced cluster coordinates to populated places.
    Relocate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_parser = parse_relocation, default_value = "ruc")]
        mode: RelocationMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the feature matrix for clusters or populated places.
    Features {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "clusters")]
        locations: commands::Locations,
        #[arg(long, value_parser = parse_relocation, default_value = "none")]
        relocation: RelocationMode,
        /// Append the image-embedding block.
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperparameter search, held-out evaluation and final model.
    Train(TrainArgs),
    /// Apply a trained run to every cluster of a bundle.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every populated place and write the map artifacts.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-country evaluation without retraining.
    Transfer {
        /// `NAME=DIR` per country, DIR written by `train`.
        #[arg(long = "run", required = true, num_args = 1)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic country bundle with known wealth process.
    Synth(SynthArgs),
    /// Rebuild result tables from persisted run artifacts.
    Report {
        #[arg(long = "run", required = true, num_args = 1)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_recency)]
    recency: Option<RecencyMode>,
    #[arg(long, value_parser = parse_relocation)]
    relocation: Option<RelocationMode>,
    #[arg(long, value_parser = parse_weights)]
    weights: Option<WeightScheme>,
    #[arg(long)]
    ens_beta: Option<f64>,
    /// Search profile: ci or full.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_target_mode)]
    target_mode: Option<TargetMode>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    embeddings: Option<bool>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "SYN")]
    country: String,
    #[arg(long, default_value_t = 1000)]
    n_clusters: usize,
    #[arg(long, default_value_t = 300)]
    n_places: usize,
    #[arg(long, default_value_t = 0.3)]
    urban_share: f64,
    /// Target optimal NRMSE of the cluster mean.
    #[arg(long, default_value_t = 0.4)]
    bayes_nrmse: f64,
    #[arg(long)]
    embeddings: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
