//! Batch harness for certifying phase-mixing deviation bounds.
//!
//! Exit codes: 0 on success, 1 on any error, 2 when the certified bound is
//! violated by the empirical series (so CI can consume verdicts).

mod config;
mod exprparse;
mod runner;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::Config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "phasemix",
    about = "Deviation-bound certification for nearly integrable ensembles",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: a timestamped subdirectory of output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured worker count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force the dt/2 refinement check.
    #[arg(long = "dt-check", global = true)]
    dt_check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: partition, normal form, mixing, empirical series,
    /// verdicts.
    Verify,
    /// Mixing constant and tail only.
    Mixing,
    /// Resonant/nonresonant partition and resonant mass only.
    Resonance,
    /// Normal-form package summary only.
    Normalform,
    /// Cartesian sweep over system.epsilons.
    Sweep,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    let path = cli
        .config
        .as_ref()
        .context("--config PATH is required")?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = Config::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.estimator.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.estimator.threads = threads;
    }
    if cli.dt_check {
        cfg.flags.dt_check = true;
    }

    let name = match cli.command {
        Command::Verify => "verify",
        Command::Mixing => "mixing",
        Command::Resonance => "resonance",
        Command::Normalform => "normalform",
        Command::Sweep => "sweep",
    };
    let out_dir = runner::resolve_out_dir(&cfg, cli.out.as_deref(), name);
    match cli.command {
        Command::Verify => runner::cmd_verify(&cfg, &out_dir),
        Command::Mixing => runner::cmd_mixing(&cfg, &out_dir),
        Command::Resonance => runner::cmd_resonance(&cfg, &out_dir),
        Command::Normalform => runner::cmd_normalform(&cfg, &out_dir),
        Command::Sweep => runner::cmd_sweep(&cfg, &out_dir),
    }
}
