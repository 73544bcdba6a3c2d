//! Command-line front end for the benchmark experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver-failure budget
//! exceeded, 4 I/O error.

mod checkpoint;
mod config;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::checkpoint::config_fingerprint;
use crate::config::parse_config;
use crate::experiment::{run_experiment, summarize, RunError, RunOptions, FALLBACK_BUDGET};

#[derive(Parser)]
#[command(name = "gpclf", about = "Uncertainty-aware CLF controller experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment a config describes and write its artifacts.
    Run {
        config: PathBuf,
        /// Resume from a saved checkpoint instead of collecting data.
        #[arg(long, value_name = "PATH")]
        load_checkpoint: Option<PathBuf>,
        /// Accept a checkpoint whose fingerprint disagrees with the config.
        #[arg(long)]
        allow_checkpoint_mismatch: bool,
        /// Write every failed SOCP instance to failed_solves.txt.
        #[arg(long)]
        dump_failed_solves: bool,
        /// Override the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file and report every problem found.
    Validate { config: PathBuf },
}

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER_BUDGET: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    ExitCode::from(dispatch(Cli::parse()))
}

fn dispatch(cli: Cli) -> u8 {
    match cli.command {
        Command::Validate { config } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", config.display());
                    return EXIT_IO;
                }
            };
            match parse_config(&text) {
                Ok(cfg) => {
                    println!("ok: {} benchmark, seed {}", cfg.benchmark.as_str(), cfg.seed);
                    EXIT_OK
                }
                Err(diags) => {
                    for d in &diags {
                        eprintln!("config error: {d}");
                    }
                    EXIT_CONFIG
                }
            }
        }
        Command::Run { config, load_checkpoint, allow_checkpoint_mismatch, dump_failed_solves, seed } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", config.display());
                    return EXIT_IO;
                }
            };
            let mut cfg = match parse_config(&text) {
                Ok(cfg) => cfg,
                Err(diags) => {
                    for d in &diags {
                        eprintln!("config error: {d}");
                    }
                    return EXIT_CONFIG;
                }
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.episodic.seed = seed;
            }
            let fingerprint = config_fingerprint(&text, cfg.seed);
            let opts = RunOptions { load_checkpoint, allow_checkpoint_mismatch, dump_failed_solves };
            match run_experiment(&cfg, &fingerprint, &opts) {
                Ok(report) => {
                    println!("{}", summarize(&report));
                    if report.budget_exceeded() {
                        eprintln!(
                            "a controller exceeded the {:.0}% solver-failure budget",
                            FALLBACK_BUDGET * 100.0
                        );
                        EXIT_SOLVER_BUDGET
                    } else {
                        EXIT_OK
                    }
                }
                Err(e @ RunError::CheckpointMismatch { .. }) => {
                    eprintln!("{e}");
                    EXIT_CONFIG
                }
                Err(RunError::Setup(msg)) => {
                    eprintln!("config error: {msg}");
                    EXIT_CONFIG
                }
                Err(RunError::Io(e)) => {
                    eprintln!("io error: {e}");
                    EXIT_IO
                }
            }
        }
    }
}
