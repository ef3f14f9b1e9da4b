mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rop", version, about = "Regularized multislice ptychography")]
struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "rop-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from a structure or potential.
    Simulate,
    /// Reconstruct potential, probe and positions from a dataset.
    Reconstruct(commands::reconstruct::Args),
    /// Trim, bin and crop the patterns of a dataset.
    Reduce(commands::reduce::Args),
    /// Print the oversampling ratio and design checks of a geometry.
    Plan(commands::plan::Args),
    /// Randomly displace scan positions.
    Perturb(commands::perturb::Args),
    /// Reconstruct over a grid of regularization weights.
    SweepMu(commands::sweep::Args),
    /// Compare analytic gradients with finite differences.
    VerifyGrad,
    /// Render raw fields, volumes or datasets as PNG.
    Export(commands::export::Args),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: rayon::current_num_threads(),
    };
    match cli.command {
        Command::Simulate => commands::simulate::run(&ctx),
        Command::Reconstruct(a) => commands::reconstruct::run(&ctx, &a),
        Command::Reduce(a) => commands::reduce::run(&ctx, &a),
        Command::Plan(a) => commands::plan::run(&ctx, &a),
        Command::Perturb(a) => commands::perturb::run(&ctx, &a),
        Command::SweepMu(a) => commands::sweep::run(&ctx, &a),
        Command::VerifyGrad => commands::verify::run(&ctx),
        Command::Export(a) => commands::export::run(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code_name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
