use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mixssl_cli::{execute, Command};

/// Simulation, fitting and Fisher-information reports for semi-supervised
/// Gaussian mixtures with informative label missingness.
#[derive(Debug, Parser)]
#[command(name = "mixssl", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "MIXSSL_JOBS")]
    jobs: Option<usize>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli.command, &cli.config, &cli.out, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
