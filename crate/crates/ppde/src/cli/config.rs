//! Experiment configuration: TOML schema, defaults, materialization, and
//! validation.
//!
//! The schema is strict (unknown keys are rejected) and every field has a
//! default, so a minimal config can be a single section or even empty.
//! Before a run, [`ExperimentConfig::materialize`] fills in the section for
//! the requested command and resolves every cross-section default (for
//! example an unset expectation level becomes the model's gradient bound
//! `L`). The materialized config is what gets written back to disk and
//! embedded in summaries: it contains no implicit defaults, so re-running
//! it reproduces the original outputs bit-exactly.

use serde::{Deserialize, Serialize};

use super::CommandKind;
use crate::bsde::RegressionBasis;
use crate::library::{Params, DRIVER_NAMES, PROCESS_NAMES, SIGMA_NAMES};
use crate::snell::{DEFAULT_CONTACT_TOL, MAX_TREE_DEPTH};
use crate::{Error, Result};

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    100
}
fn default_dim() -> usize {
    1
}
fn default_sigma() -> String {
    "identity".into()
}
fn default_gradient_bound() -> f64 {
    0.5
}
fn default_value_bound() -> f64 {
    0.0
}
fn default_driver() -> String {
    "zero".into()
}
fn default_payoff() -> String {
    "square".into()
}
fn default_n_paths() -> usize {
    200_000
}
fn default_seed() -> u64 {
    42
}
fn default_degree() -> usize {
    3
}
fn default_ridge() -> f64 {
    // Stays in sync with the regression module's own default.
    RegressionBasis::new(1).ridge()
}
fn default_contact_tol() -> f64 {
    DEFAULT_CONTACT_TOL
}
fn default_out_dir() -> String {
    "out".into()
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}
fn default_write_paths() -> usize {
    100
}
fn default_side() -> String {
    "upper".into()
}
fn default_candidate_kind() -> String {
    "process".into()
}
fn default_candidate_name() -> String {
    "heat-square".into()
}
fn default_modes() -> Vec<String> {
    vec!["mean-sub".into(), "mean-super".into()]
}
fn default_points() -> usize {
    20
}
fn default_rules() -> Vec<usize> {
    vec![5, 10, 20]
}
fn default_sample_paths() -> usize {
    20
}
fn default_jet_paths() -> usize {
    10_000
}
fn default_experiment() -> String {
    "expectation".into()
}

/// `[grid]`: uniform time grid on `[0, T]` with `n` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Horizon `T > 0`.
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    /// Number of steps `n >= 1`.
    #[serde(default = "default_steps")]
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            horizon: default_horizon(),
            n: default_steps(),
        }
    }
}

/// `[model]`: diffusion coefficient and Lipschitz bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// State dimension.
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Diffusion name from the built-in library.
    #[serde(default = "default_sigma")]
    pub sigma: String,
    /// Diffusion parameters.
    #[serde(default)]
    pub sigma_params: Params,
    /// Gradient Lipschitz bound; the default level for expectation, Snell,
    /// viscosity, and comparison runs.
    #[serde(rename = "L", default = "default_gradient_bound")]
    pub gradient_bound: f64,
    /// Value Lipschitz bound (reported; drivers take their own parameters).
    #[serde(rename = "L_0", default = "default_value_bound")]
    pub value_bound: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: default_dim(),
            sigma: default_sigma(),
            sigma_params: Params::new(),
            gradient_bound: default_gradient_bound(),
            value_bound: default_value_bound(),
        }
    }
}

/// `[driver]`: named generator for `bsde` and terminal-candidate runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    #[serde(default = "default_driver")]
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl Default for DriverSection {
    fn default() -> Self {
        DriverSection {
            name: default_driver(),
            params: Params::new(),
        }
    }
}

/// `[payoff]`: named terminal functional (also the obstacle for `snell`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    #[serde(default = "default_payoff")]
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl Default for PayoffSection {
    fn default() -> Self {
        PayoffSection {
            name: default_payoff(),
            params: Params::new(),
        }
    }
}

/// `[solver]`: ensemble size, seed, and regression settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Number of Monte-Carlo paths.
    #[serde(rename = "N", default = "default_n_paths")]
    pub n_paths: usize,
    /// Base seed; every stream in the run derives from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Polynomial degree of the regression basis.
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Relative ridge of the regression (intercept excluded).
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Envelope-obstacle contact tolerance for stopping rules.
    #[serde(default = "default_contact_tol")]
    pub contact_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            n_paths: default_n_paths(),
            seed: default_seed(),
            degree: default_degree(),
            ridge: default_ridge(),
            contact_tol: default_contact_tol(),
        }
    }
}

/// `[output]`: where and what to write.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory (created if missing).
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Artifact families to write: `csv`, `json`.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
    /// Cap on the number of paths written to per-path CSV exports.
    #[serde(default = "default_write_paths")]
    pub write_paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
            formats: default_formats(),
            write_paths: default_write_paths(),
        }
    }
}

/// `[expectation]`: options for the `expectation` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationSection {
    /// `upper` or `lower`.
    #[serde(default = "default_side")]
    pub side: String,
    /// Drift bound; defaults to `model.L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

impl Default for ExpectationSection {
    fn default() -> Self {
        ExpectationSection {
            side: default_side(),
            level: None,
        }
    }
}

/// `[snell]`: options for the `snell` command (the obstacle is `[payoff]`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnellSection {
    /// Drift bound; defaults to `model.L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Fixed horizon index; defaults to `grid.n` (the full horizon).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_steps: Option<usize>,
    /// When set, cross-check against the exact binary-tree oracle of this
    /// depth (its own grid; independent of `grid.n`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_depth: Option<usize>,
}

/// `[viscosity]`: options for the `viscosity-check` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscositySection {
    /// Candidate value process, by library name.
    #[serde(default = "default_candidate_name")]
    pub candidate: String,
    #[serde(default)]
    pub candidate_params: Params,
    /// Check modes: `mean-sub`, `mean-super`, `upper-sub`, `upper-super`.
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    /// Number of sampled interior points.
    #[serde(default = "default_points")]
    pub points: usize,
    /// Fixed-step horizon rules applied at every point.
    #[serde(default = "default_rules")]
    pub rules: Vec<usize>,
    /// Drift bound for `upper-*` modes; defaults to `model.L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Seed of the point sampler; defaults to `solver.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_seed: Option<u64>,
    /// Conditional-ensemble size per point; defaults to `solver.N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths_per_point: Option<usize>,
}

impl Default for ViscositySection {
    fn default() -> Self {
        ViscositySection {
            candidate: default_candidate_name(),
            candidate_params: Params::new(),
            modes: default_modes(),
            points: default_points(),
            rules: default_rules(),
            level: None,
            point_seed: None,
            paths_per_point: None,
        }
    }
}

/// One side of a comparison: a closed-form process or a terminal-data
/// backward solve under the `[driver]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSection {
    /// `process` (closed form) or `terminal` (backward solve).
    #[serde(default = "default_candidate_kind")]
    pub kind: String,
    /// Library name of the process / terminal payoff.
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

/// `[compare]`: options for the `compare` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Expected-smaller candidate.
    pub u: CandidateSection,
    /// Expected-larger candidate.
    pub v: CandidateSection,
    /// Number of ensemble paths whose full time slice enters the report.
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
    /// Enable the difference diagnostic with this jet window
    /// (closed-form candidates only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difference_window: Option<usize>,
    /// Conditional-ensemble size for difference-mode jets.
    #[serde(default = "default_jet_paths")]
    pub jet_paths: usize,
    /// Gradient bound used by difference-mode residuals; defaults to
    /// `model.L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

/// One refinement level of a convergence study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    /// Paths at this level.
    #[serde(rename = "N")]
    pub n_paths: usize,
    /// Grid steps at this level.
    pub n: usize,
}

/// `[converge]`: options for the `converge` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    /// Inner experiment: `expectation`, `bsde`, or `snell`.
    #[serde(default = "default_experiment")]
    pub experiment: String,
    /// Refinement levels, at least two.
    pub levels: Vec<LevelSpec>,
    /// Analytic target; when set, each row gains an absolute-error column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

/// A full experiment description, one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub driver: DriverSection,
    #[serde(default)]
    pub payoff: PayoffSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectation: Option<ExpectationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snell: Option<SnellSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viscosity: Option<ViscositySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converge: Option<ConvergeSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: GridSection::default(),
            model: ModelSection::default(),
            driver: DriverSection::default(),
            payoff: PayoffSection::default(),
            solver: SolverSection::default(),
            output: OutputSection::default(),
            expectation: None,
            snell: None,
            viscosity: None,
            compare: None,
            converge: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML string.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    /// Read and parse a TOML file.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Serialize back to TOML (the `resolved.toml` artifact).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    /// Fill in the section for `kind` and resolve every cross-section
    /// default, so the config serializes with no implicit values.
    pub fn materialize(&mut self, kind: CommandKind) {
        let level = self.gradient_bound();
        match kind {
            CommandKind::Simulate | CommandKind::Bsde => {}
            CommandKind::Expectation => {
                let s = self.expectation.get_or_insert_with(Default::default);
                s.level.get_or_insert(level);
            }
            CommandKind::Snell => {
                let n = self.grid.n;
                let s = self.snell.get_or_insert_with(Default::default);
                s.level.get_or_insert(level);
                s.horizon_steps.get_or_insert(n);
            }
            CommandKind::ViscosityCheck => {
                let (seed, n_paths) = (self.solver.seed, self.solver.n_paths);
                let s = self.viscosity.get_or_insert_with(Default::default);
                s.level.get_or_insert(level);
                s.point_seed.get_or_insert(seed);
                s.paths_per_point.get_or_insert(n_paths);
            }
            CommandKind::Compare => {
                if let Some(s) = self.compare.as_mut() {
                    s.level.get_or_insert(level);
                }
            }
            CommandKind::Converge => {}
        }
    }

    fn gradient_bound(&self) -> f64 {
        self.model.gradient_bound
    }

    /// Validate numeric ranges and enumerated names for a run of `kind`.
    /// Library names (sigma, driver, payoff) are resolved when the objects
    /// are built; both paths produce field-named config errors.
    pub fn validate(&self, kind: CommandKind) -> Result<()> {
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            return Err(Error::config(
                "grid.T",
                format!("horizon must be positive and finite, got {}", self.grid.horizon),
            ));
        }
        if self.grid.n == 0 {
            return Err(Error::config("grid.n", "need at least one time step"));
        }
        if self.model.d == 0 {
            return Err(Error::config("model.d", "dimension must be at least 1"));
        }
        if !(self.model.gradient_bound >= 0.0) || !self.model.gradient_bound.is_finite() {
            return Err(Error::config(
                "model.L",
                format!(
                    "gradient bound must be nonnegative and finite, got {}",
                    self.model.gradient_bound
                ),
            ));
        }
        if !(self.model.value_bound >= 0.0) || !self.model.value_bound.is_finite() {
            return Err(Error::config(
                "model.L_0",
                format!(
                    "value bound must be nonnegative and finite, got {}",
                    self.model.value_bound
                ),
            ));
        }
        if !SIGMA_NAMES.contains(&self.model.sigma.as_str()) {
            return Err(Error::config(
                "model.sigma",
                format!(
                    "unknown diffusion `{}`; available: {}",
                    self.model.sigma,
                    SIGMA_NAMES.join(", ")
                ),
            ));
        }
        if !DRIVER_NAMES.contains(&self.driver.name.as_str()) {
            return Err(Error::config(
                "driver.name",
                format!(
                    "unknown driver `{}`; available: {}",
                    self.driver.name,
                    DRIVER_NAMES.join(", ")
                ),
            ));
        }
        if !PROCESS_NAMES.contains(&self.payoff.name.as_str()) {
            return Err(Error::config(
                "payoff.name",
                format!(
                    "unknown payoff `{}`; available: {}",
                    self.payoff.name,
                    PROCESS_NAMES.join(", ")
                ),
            ));
        }
        if self.solver.n_paths == 0 {
            return Err(Error::config("solver.N", "need at least one path"));
        }
        if self.solver.degree == 0 {
            return Err(Error::config(
                "solver.degree",
                "polynomial degree must be at least 1",
            ));
        }
        if !(self.solver.ridge >= 0.0) || !self.solver.ridge.is_finite() {
            return Err(Error::config(
                "solver.ridge",
                format!("ridge must be nonnegative and finite, got {}", self.solver.ridge),
            ));
        }
        if !(self.solver.contact_tol >= 0.0) {
            return Err(Error::config(
                "solver.contact_tol",
                format!("contact tolerance must be nonnegative, got {}", self.solver.contact_tol),
            ));
        }
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats", "need at least one format"));
        }
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                return Err(Error::config(
                    "output.formats",
                    format!("unknown format `{f}`; available: csv, json"),
                ));
            }
        }

        match kind {
            CommandKind::Simulate | CommandKind::Bsde => {}
            CommandKind::Expectation => {
                let s = self.section(self.expectation.as_ref(), "expectation")?;
                if s.side != "upper" && s.side != "lower" {
                    return Err(Error::config(
                        "expectation.side",
                        format!("unknown side `{}`; available: upper, lower", s.side),
                    ));
                }
                validate_level("expectation.level", s.level)?;
            }
            CommandKind::Snell => {
                let s = self.section(self.snell.as_ref(), "snell")?;
                validate_level("snell.level", s.level)?;
                if let Some(m) = s.horizon_steps {
                    if m == 0 || m > self.grid.n {
                        return Err(Error::config(
                            "snell.horizon_steps",
                            format!("must lie in 1..={}, got {m}", self.grid.n),
                        ));
                    }
                }
                if let Some(depth) = s.tree_depth {
                    if depth == 0 || depth > MAX_TREE_DEPTH {
                        return Err(Error::config(
                            "snell.tree_depth",
                            format!("must lie in 1..={MAX_TREE_DEPTH}, got {depth}"),
                        ));
                    }
                    if self.model.d != 1 {
                        return Err(Error::config(
                            "snell.tree_depth",
                            "the tree oracle is one-dimensional; requires model.d = 1",
                        ));
                    }
                }
            }
            CommandKind::ViscosityCheck => {
                let s = self.section(self.viscosity.as_ref(), "viscosity")?;
                if !PROCESS_NAMES.contains(&s.candidate.as_str()) {
                    return Err(Error::config(
                        "viscosity.candidate",
                        format!(
                            "unknown process `{}`; available: {}",
                            s.candidate,
                            PROCESS_NAMES.join(", ")
                        ),
                    ));
                }
                if s.points == 0 {
                    return Err(Error::config(
                        "viscosity.points",
                        "need at least one sample point",
                    ));
                }
                if self.grid.n < 2 {
                    return Err(Error::config(
                        "grid.n",
                        "sampling interior points needs at least two steps",
                    ));
                }
                if s.modes.is_empty() {
                    return Err(Error::config("viscosity.modes", "need at least one mode"));
                }
                for m in &s.modes {
                    if parse_mode(m).is_none() {
                        return Err(Error::config(
                            "viscosity.modes",
                            format!(
                                "unknown mode `{m}`; available: mean-sub, mean-super, upper-sub, upper-super"
                            ),
                        ));
                    }
                }
                if s.rules.is_empty() {
                    return Err(Error::config("viscosity.rules", "need at least one horizon rule"));
                }
                if s.rules.iter().any(|&r| r == 0) {
                    return Err(Error::config(
                        "viscosity.rules",
                        "horizon rules must be at least one step",
                    ));
                }
                validate_level("viscosity.level", s.level)?;
                if let Some(p) = s.paths_per_point {
                    if p < 2 {
                        return Err(Error::config(
                            "viscosity.paths_per_point",
                            "need at least two paths per point",
                        ));
                    }
                }
            }
            CommandKind::Compare => {
                let s = self.section(self.compare.as_ref(), "compare")?;
                for (field, c) in [("compare.u", &s.u), ("compare.v", &s.v)] {
                    if c.kind != "process" && c.kind != "terminal" {
                        return Err(Error::config(
                            &format!("{field}.kind"),
                            format!("unknown kind `{}`; available: process, terminal", c.kind),
                        ));
                    }
                    if !PROCESS_NAMES.contains(&c.name.as_str()) {
                        return Err(Error::config(
                            &format!("{field}.name"),
                            format!(
                                "unknown process `{}`; available: {}",
                                c.name,
                                PROCESS_NAMES.join(", ")
                            ),
                        ));
                    }
                }
                if s.sample_paths == 0 {
                    return Err(Error::config(
                        "compare.sample_paths",
                        "need at least one sample path",
                    ));
                }
                if s.sample_paths > self.solver.n_paths {
                    return Err(Error::config(
                        "compare.sample_paths",
                        format!(
                            "cannot exceed solver.N = {}, got {}",
                            self.solver.n_paths, s.sample_paths
                        ),
                    ));
                }
                if let Some(w) = s.difference_window {
                    if w == 0 {
                        return Err(Error::config(
                            "compare.difference_window",
                            "jet window must be at least 1",
                        ));
                    }
                }
                if s.jet_paths < 2 {
                    return Err(Error::config(
                        "compare.jet_paths",
                        "need at least two paths per jet",
                    ));
                }
                validate_level("compare.level", s.level)?;
            }
            CommandKind::Converge => {
                let s = self.section(self.converge.as_ref(), "converge")?;
                if !matches!(s.experiment.as_str(), "expectation" | "bsde" | "snell") {
                    return Err(Error::config(
                        "converge.experiment",
                        format!(
                            "unknown experiment `{}`; available: expectation, bsde, snell",
                            s.experiment
                        ),
                    ));
                }
                if s.levels.len() < 2 {
                    return Err(Error::config(
                        "converge.levels",
                        format!("need at least two refinement levels, got {}", s.levels.len()),
                    ));
                }
                for (k, level) in s.levels.iter().enumerate() {
                    if level.n_paths == 0 {
                        return Err(Error::config(
                            &format!("converge.levels[{k}].N"),
                            "need at least one path",
                        ));
                    }
                    if level.n == 0 {
                        return Err(Error::config(
                            &format!("converge.levels[{k}].n"),
                            "need at least one time step",
                        ));
                    }
                }
                if let Some(t) = s.target {
                    if !t.is_finite() {
                        return Err(Error::config(
                            "converge.target",
                            format!("target must be finite, got {t}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn section<'a, T>(&self, section: Option<&'a T>, name: &str) -> Result<&'a T> {
        section.ok_or_else(|| {
            Error::config(name, format!("section required for the {name} command"))
        })
    }
}

fn validate_level(field: &str, level: Option<f64>) -> Result<()> {
    if let Some(l) = level {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::config(
                field,
                format!("level must be nonnegative and finite, got {l}"),
            ));
        }
    }
    Ok(())
}

/// Mode-string lookup shared by validation and the runner.
pub(super) fn parse_mode(s: &str) -> Option<crate::viscosity::MartingaleMode> {
    use crate::viscosity::MartingaleMode::*;
    match s {
        "mean-sub" => Some(MeanSub),
        "mean-super" => Some(MeanSuper),
        "upper-sub" => Some(UpperSub),
        "upper-super" => Some(UpperSuper),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_to_defaults() {
        let mut cfg = ExperimentConfig::from_toml("").unwrap();
        cfg.materialize(CommandKind::Expectation);
        cfg.validate(CommandKind::Expectation).unwrap();
        assert_eq!(cfg.grid.n, 100);
        assert_eq!(cfg.grid.horizon, 1.0);
        assert_eq!(cfg.solver.n_paths, 200_000);
        assert_eq!(cfg.solver.degree, 3);
        let e = cfg.expectation.as_ref().unwrap();
        assert_eq!(e.side, "upper");
        assert_eq!(e.level, Some(0.5));
    }

    #[test]
    fn zero_steps_names_the_field() {
        let cfg = ExperimentConfig::from_toml("[grid]\nn = 0\n").unwrap();
        let err = cfg.validate(CommandKind::Simulate).unwrap_err();
        assert!(err.to_string().contains("grid.n"), "got: {err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("[grid]\nsteps = 10\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_payoff_names_the_field() {
        let cfg = ExperimentConfig::from_toml("[payoff]\nname = \"nope\"\n").unwrap();
        let err = cfg.validate(CommandKind::Bsde).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("payoff.name") && msg.contains("nope"), "got: {msg}");
    }

    #[test]
    fn resolved_roundtrip_is_stable() {
        let mut cfg = ExperimentConfig::from_toml(
            "[model]\nL = 0.3\n[snell]\n[solver]\nN = 500\n",
        )
        .unwrap();
        cfg.materialize(CommandKind::Snell);
        let text = cfg.to_toml().unwrap();
        let mut again = ExperimentConfig::from_toml(&text).unwrap();
        again.materialize(CommandKind::Snell);
        assert_eq!(text, again.to_toml().unwrap());
        let s = again.snell.as_ref().unwrap();
        assert_eq!(s.level, Some(0.3));
        assert_eq!(s.horizon_steps, Some(100));
    }

    #[test]
    fn compare_section_required() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        let err = cfg.validate(CommandKind::Compare).unwrap_err();
        assert!(err.to_string().contains("compare"), "got: {err}");
    }

    #[test]
    fn single_converge_level_rejected() {
        let cfg = ExperimentConfig::from_toml(
            "[converge]\nlevels = [{ N = 100, n = 10 }]\n",
        )
        .unwrap();
        let err = cfg.validate(CommandKind::Converge).unwrap_err();
        assert!(err.to_string().contains("converge.levels"), "got: {err}");
    }
}
