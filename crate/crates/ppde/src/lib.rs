//! Regression Monte Carlo engine for semilinear path-dependent PDEs.
//!
//! The engine works on a uniform time grid over path space: paths start at
//! the origin, functionals (`sigma`, drivers, payoffs, obstacles,
//! candidate solutions) are adapted maps of `(time index, path)`, and all
//! expectations are Monte-Carlo estimates over seeded path ensembles.
//!
//! Module map:
//! - [`paths`]: the path algebra — grids, paths, concatenation, shifted
//!   functionals, pseudo-distance, ensembles with measure tags.
//! - [`sde`]: Euler simulation of controlled diffusions, Girsanov
//!   reweighting, and conditional (prefix-frozen) ensembles.
//! - [`bsde`]: least-squares Monte Carlo backward solver, sublinear
//!   expectations (upper/lower), pathwise value functionals, and
//!   dynamic-programming residuals.
//! - [`snell`]: reflected backward recursions for optimal stopping, the
//!   binary-tree oracle, and stopping rules.
//! - [`viscosity`]: the verification laboratory — tangency search, test
//!   gaps, jet estimation, martingale certification, comparison
//!   experiments.
//! - [`library`]: named diffusions, drivers, payoffs and candidates used
//!   by the CLI.
//! - [`cli`]: config-driven experiment runner.
//!
//! Determinism contract: every random quantity is a pure function of the
//! configured seed; parallel reductions run in a fixed blocked order, so
//! results are bit-identical across thread counts.

pub mod bsde;
pub mod cli;
pub mod error;
pub mod paths;
pub mod library;
pub mod sde;
pub mod snell;
pub mod viscosity;
pub(crate) mod util;

pub use error::{Error, Result};
