//! `sigeo`: run the width sweep, the warm-up correlation study, an
//! evolutionary search, or score a single genotype.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies flag
//! overrides (flag > config > default), writes its outputs and a
//! `manifest.json` to the output directory, and exits with 0 on success, 1 on
//! a compute failure and 2 on a config, input or output problem.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigeo_core::ProxyWeights;

use commands::{Common, ScoreFlags, SearchFlags};
use error::CliError;

#[derive(Parser)]
#[command(name = "sigeo", version, about = "Gradient-statistics architecture scoring and search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one-hidden-layer MLPs over the width grid and relate early
    /// gradient statistics to their final losses.
    ValidateTheory(CommonArgs),
    /// Benchmark sampled cell genotypes and correlate every proxy with
    /// ground-truth accuracy at each warm-up level.
    Correlate(CommonArgs),
    /// Regularized evolution driven by the warm-up-then-score objective.
    Search {
        #[command(flatten)]
        common: CommonArgs,
        /// Train the best genotype to completion and write its report.
        #[arg(long)]
        train_best: bool,
        /// Number of evolution iterations
        #[arg(long)]
        iterations: Option<usize>,
        /// Weight preset: zico, zero_shot, warmed or warmed_cv.
        #[arg(long, value_parser = parse_preset)]
        weights: Option<ProxyWeights>,
    },
    /// Score one genotype and print the result as JSON.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// File holding the genotype JSON.
        #[arg(long)]
        genotype: Option<PathBuf>,
        /// Weight preset: zico, zero_shot, warmed or warmed_cv.
        #[arg(long, value_parser = parse_preset)]
        weights: Option<ProxyWeights>,
        /// Fraction of the training set consumed by warm-up SGD steps, in [0, 1]
        #[arg(long)]
        warmup_fraction: Option<f64>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: sigeo-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Parallel candidate evaluations; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed; every other seed is derived from it
    #[arg(long)]
    seed: Option<u64>,
    /// IDX dataset directory; overrides the config and SIGEO_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Print the effective config and exit without running.
    #[arg(long)]
    print_config: bool,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        let workers = a
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1);
        Common {
            config: a.config,
            out_dir: a.out_dir,
            workers,
            seed: a.seed,
            data_dir: a.data_dir,
            print_config: a.print_config,
        }
    }
}

fn parse_preset(s: &str) -> Result<ProxyWeights, String> {
    ProxyWeights::preset(s).ok_or_else(|| format!("unknown preset `{s}` (zico, zero_shot, warmed, warmed_cv)"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::ValidateTheory(a) => commands::validate_theory(&a.into()),
        Command::Correlate(a) => commands::correlate(&a.into()),
        Command::Search {
            common,
            train_best,
            iterations,
            weights,
        } => commands::search(
            &common.into(),
            &SearchFlags {
                train_best,
                iterations,
                weights,
            },
        ),
        Command::Score {
            common,
            genotype,
            weights,
            warmup_fraction,
        } => {
            let flags = ScoreFlags {
                genotype,
                weights,
                warmup_fraction,
            };
            if let Some(score) = commands::score(&common.into(), &flags)? {
                println!("{}", serde_json::to_string(&score).expect("score serializes"));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
