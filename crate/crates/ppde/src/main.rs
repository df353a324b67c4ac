//! `ppde` — Monte-Carlo toolkit for semilinear path-dependent PDEs.
//!
//! Seven config-driven subcommands; see the crate README and the `cli`
//! module for the config schema. Prints the JSON summary to stdout on
//! success; on failure prints a machine-readable error report to stderr and
//! exits 2 (validation), 3 (numerical failure), or 1 (other).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ppde::cli::{run, CommandKind, ExperimentConfig};
use ppde::Error;

#[derive(Parser)]
#[command(
    name = "ppde",
    version,
    about = "Simulation, nonlinear expectations, BSDE/reflected-BSDE solvers, \
             and viscosity-style diagnostics for path-dependent PDEs"
)]
struct Cli {
    /// TOML experiment config; defaults apply for missing sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override `solver.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads (0 = automatic). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a base ensemble and report terminal payoff statistics.
    Simulate,
    /// Sublinear upper/lower expectation of the payoff.
    Expectation,
    /// Backward solve for the configured driver and terminal payoff.
    Bsde,
    /// Reflected backward solve with the payoff as obstacle.
    Snell,
    /// Martingale-property report for a candidate value process.
    #[command(name = "viscosity-check")]
    ViscosityCheck,
    /// Ordered-pair comparison of two candidate solutions.
    Compare,
    /// Repeat an experiment across (N, n) refinement levels.
    Converge,
}

impl Command {
    fn kind(&self) -> CommandKind {
        match self {
            Command::Simulate => CommandKind::Simulate,
            Command::Expectation => CommandKind::Expectation,
            Command::Bsde => CommandKind::Bsde,
            Command::Snell => CommandKind::Snell,
            Command::ViscosityCheck => CommandKind::ViscosityCheck,
            Command::Compare => CommandKind::Compare,
            Command::Converge => CommandKind::Converge,
        }
    }
}

fn execute(cli: &Cli) -> ppde::Result<serde_json::Value> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::ConfigParse(format!("--threads: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.solver.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.display().to_string();
    }
    let artifacts = run(cli.command.kind(), config)?;
    Ok(artifacts.summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            let report = serde_json::json!({
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
