//! Config-driven experiment runner.
//!
//! A single TOML file describes an experiment: the time grid, the model
//! (diffusion and Lipschitz bounds), a named driver and payoff from the
//! built-in library, solver settings, and output options. The seven
//! subcommands dispatch on that config:
//!
//! - `simulate`: draw a base ensemble, report terminal payoff statistics.
//! - `expectation`: sublinear upper/lower expectation of the payoff.
//! - `bsde`: backward solve for the configured driver and terminal payoff.
//! - `snell`: reflected backward solve with the payoff as obstacle.
//! - `viscosity-check`: martingale-property report for a candidate value
//!   process.
//! - `compare`: ordered-pair experiment for two candidate solutions.
//! - `converge`: the same experiment across `(N, n)` refinement levels.
//!
//! Every run writes the fully resolved config next to its outputs
//! (`resolved.toml`) and embeds it in the JSON summary, so any artifact can
//! be reproduced bit-exactly from the files it sits next to. Elapsed time
//! is reported as `runtime_ms`, the one field that varies between
//! otherwise identical runs.

mod config;
mod run;

pub use config::{
    CandidateSection, CompareSection, ConvergeSection, DriverSection, ExpectationSection,
    ExperimentConfig, GridSection, LevelSpec, ModelSection, OutputSection, PayoffSection,
    SnellSection, SolverSection, ViscositySection,
};
pub use run::{run, RunArtifacts};

/// The seven subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Expectation,
    Bsde,
    Snell,
    ViscosityCheck,
    Compare,
    Converge,
}

impl CommandKind {
    /// Name as spelled on the command line.
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Expectation => "expectation",
            CommandKind::Bsde => "bsde",
            CommandKind::Snell => "snell",
            CommandKind::ViscosityCheck => "viscosity-check",
            CommandKind::Compare => "compare",
            CommandKind::Converge => "converge",
        }
    }
}
