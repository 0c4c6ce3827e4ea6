//! `patchace`: synthesize data, fit patch Gaussians, score and evaluate.
//!
//! Exit status is 0 on success, 1 on runtime or data errors and 2 on usage
//! errors. `PATCH_ACE_THREADS` caps the worker pool.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod ablate;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<patchace_core::Error> for Failure {
    fn from(e: patchace_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(
    name = "patchace",
    version,
    about = "Patch-distribution anomaly detection for SAR-like imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic speckle dataset with train/val/test splits.
    Synth(commands::SynthArgs),
    /// Run the toy extractor over a dataset and store the feature pyramids.
    Extract(commands::ExtractArgs),
    /// Fit the per-location background model on the train split.
    Fit(commands::FitArgs),
    /// Add a target signature to a model bundle.
    Signature(commands::SignatureArgs),
    /// Score a split and write patch maps, anomaly maps and image scores.
    Score(commands::ScoreArgs),
    /// Evaluate stored results, or run the full pipeline once per seed.
    Eval(commands::EvalArgs),
    /// Sweep one setting and tabulate mean ± std AUROC.
    Ablate(ablate::AblateArgs),
}

fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("PATCH_ACE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "PATCH_ACE_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Extract(a) => commands::extract(a),
        Command::Fit(a) => commands::fit(a),
        Command::Signature(a) => commands::signature(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => ablate::run(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
