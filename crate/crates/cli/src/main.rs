//! `risktube`: simulate scenarios, fit calibrators, evaluate tubes and brake
//! gating. Every output gets a `<out>.manifest.json` with content digests.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use risktube::pipeline::Method;
use risktube::tube::AmbiguityPolicy;

use commands::{BrakeArgs, EvaluateArgs};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "risktube",
    version,
    about = "Conformal risk tubes: simulation, calibration and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scenario dataset (JSON lines).
    Simulate {
        /// Dataset description, JSON (`.json`) or TOML.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset and fit per-category calibrators.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        /// Seed of the train/calibration/test split.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.01)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute coverage, tube volume, TC, BA and Risk-IoU on the test split.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long, default_value = "ours")]
        method: Method,
        /// Update the quantiles online during the test sweep.
        #[arg(long)]
        online: bool,
        #[arg(long, default_value = "include")]
        ambiguity: AmbiguityPolicy,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// JSON report; the CSV goes next to it with a `.csv` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average and misaligned brake counts for gt, distance-only, hd and ours.
    BrakeEval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long, default_value = "include")]
        ambiguity: AmbiguityPolicy,
        #[arg(long, default_value_t = 10.0)]
        distance_threshold: f64,
        /// Directory for per-clip brake traces.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, out } => commands::simulate(&config, seed, &out),
        Command::Calibrate {
            dataset,
            seed,
            alpha,
            gamma,
            out,
        } => commands::calibrate(&dataset, seed, alpha, gamma, &out),
        Command::Evaluate {
            dataset,
            calibrator,
            method,
            online,
            ambiguity,
            tau,
            out,
        } => commands::evaluate(&EvaluateArgs {
            dataset,
            calibrator,
            method,
            online,
            ambiguity,
            tau,
            out,
        }),
        Command::BrakeEval {
            dataset,
            calibrator,
            ambiguity,
            distance_threshold,
            traces,
            out,
        } => commands::brake_eval(&BrakeArgs {
            dataset,
            calibrator,
            ambiguity,
            distance_threshold,
            traces,
            out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RISKTUBE_LOG", "warn")).init();
    // clap exits with status 2 on usage errors, matching validation failures
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
