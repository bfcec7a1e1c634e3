//! Experiment runner: `young-control <experiment> --config <file>
//! [--seed S] [--threads N] [--paper-scale] [--out DIR]`.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
//! 4 infeasible problem.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use young_control::experiments::{self, CliOptions};
use young_control::Error;

#[derive(Parser)]
#[command(name = "young-control", version, about = "Minimum-variance control experiments")]
struct Cli {
    /// Experiment to run (linear-check, integrand-sweep, arm-reach,
    /// scaling-study, alpha-sweep, pulse-control).
    experiment: String,

    /// Path to the experiment configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Override the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Cap the number of worker threads.
    #[arg(long)]
    threads: Option<usize>,

    /// Use full-resolution integration steps instead of desk-scale defaults.
    #[arg(long)]
    paper_scale: bool,

    /// Artifact output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("young-control: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("young-control: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    // The experiment named on the command line must match the config so a
    // stale config cannot silently run the wrong thing.
    let opts = CliOptions { seed: cli.seed, paper_scale: cli.paper_scale, out: cli.out };
    let run_result = check_experiment(&text, &cli.experiment).and_then(|_| experiments::run(&text, &opts));
    match run_result {
        Ok(dir) => {
            println!("artifacts written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("young-control: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn check_experiment(text: &str, requested: &str) -> young_control::Result<()> {
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if let Some(v) = line.strip_prefix("experiment") {
            let v = v.trim_start().strip_prefix('=').map(|s| s.trim()).unwrap_or("");
            if v != requested {
                return Err(Error::Config(format!(
                    "config declares experiment `{v}` but `{requested}` was requested"
                )));
            }
            return Ok(());
        }
    }
    Err(Error::Config("config is missing the `experiment` key".into()))
}
