//! Verification harness for viscosity-style properties of path functionals.
//!
//! A candidate solution `u` is probed through *mean tangency*: a smooth
//! test `phi` belongs to the sub-side test family at a point when stopping
//! cannot push the recentred difference `psi = (phi - u) - (phi - u)(point)`
//! below zero in sublinear mean, i.e.
//!
//! ```text
//! gap_sub   = min_tau lower_L [ psi_tau ]   (rule located by snell( -psi )),
//! gap_super = -max_tau upper_L [ psi_tau ]  (rule located by snell(  psi )),
//! ```
//!
//! both over stopping rules up to a localizing horizon. The reflected
//! envelope locates the rule; the gap itself is the stopped expectation
//! re-evaluated at that rule, which avoids the envelope's rectified-noise
//! bias. The immediate-stop rule is always admissible and `psi(point) = 0`
//! exactly (all conditional paths share the anchor prefix), so both gaps
//! are `<= 0` by construction; membership is the statistical verdict
//! `gap >= -(3 se + floor)`.
//!
//! The other instruments follow the same estimate-and-tolerate pattern:
//! tangency-point search runs the optimal-stopping envelope on `u` itself
//! and returns the earliest pre-horizon contact; martingale certification
//! compares `u` at grid horizon rules against its value at sampled points;
//! punctual jets are windowed drift quotients paired with regression
//! gradients; comparison experiments evaluate an ordered candidate pair on
//! a shared ensemble. Every verdict carries its margin and standard error,
//! and nothing here is a proof: reports say how far the data is from
//! contradicting the claimed property.

use crate::bsde::{estimate_z, nonlinear_expectation_at, solve_bsde, RegressionBasis, Side};
use crate::error::{Error, Result};
use crate::paths::{
    Diffusion, DiscretePath, Driver, PathEnsemble, PathView, ScalarProcess, TimeGrid,
    VectorProcess,
};
use crate::sde::{conditional_ensemble, simulate_base, RngStream};
use crate::snell::{snell_envelope, StoppingRule};
use crate::util::{norm2, weighted_mean_se};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Exit radius of the default localizing horizon: the gap search stops at
/// the first time the path strays this far from its anchor value.
pub const DEFAULT_LOCALIZING_RADIUS: f64 = 1.0;

/// Absolute floor added to the `3 se` membership tolerance so that
/// exactly-zero gaps pass even when the standard error collapses to zero.
pub const MEMBER_TOL_FLOOR: f64 = 1e-6;

/// Round-off slack granted to every directional verdict: margins within
/// this band of the required sign count as clean passes.
pub const VERDICT_SLACK: f64 = 1e-9;

/// A windowed drift quotient counts as low-dispersion when its spread is
/// below this fraction of `1 + |alpha|`.
const LOW_DISPERSION_FACTOR: f64 = 0.1;

/// Default localizing length for gap searches: a tenth of the grid.
pub fn default_horizon_steps(grid: TimeGrid) -> usize {
    (grid.steps() / 10).max(1)
}

// ---------------------------------------------------------------------------
// Test processes and jets
// ---------------------------------------------------------------------------

/// Coefficients of a linear test process `phi(s, omega) = alpha s + beta . omega_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestJet {
    /// Time-drift rate.
    pub alpha: f64,
    /// Gradient point in `d`-space.
    pub beta: Vec<f64>,
}

impl TestJet {
    pub fn new(alpha: f64, beta: Vec<f64>) -> Result<Self> {
        if !alpha.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Precondition(
                "jet coefficients must be finite".into(),
            ));
        }
        Ok(TestJet { alpha, beta })
    }

    /// One-dimensional convenience constructor.
    pub fn scalar(alpha: f64, beta: f64) -> Self {
        TestJet {
            alpha,
            beta: vec![beta],
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Coefficient-wise negation; exact in IEEE arithmetic.
    pub fn negated(&self) -> TestJet {
        TestJet {
            alpha: -self.alpha,
            beta: self.beta.iter().map(|b| -b).collect(),
        }
    }

    /// Coefficient-wise sum with a jet of the same dimension.
    pub fn plus(&self, other: &TestJet) -> Result<TestJet> {
        if self.beta.len() != other.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len(),
                got: other.beta.len(),
            });
        }
        Ok(TestJet {
            alpha: self.alpha + other.alpha,
            beta: self
                .beta
                .iter()
                .zip(&other.beta)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// The linear process `alpha t_i + beta . omega_i` as a path functional.
    pub fn process(&self) -> ScalarProcess {
        let alpha = self.alpha;
        let beta = self.beta.clone();
        ScalarProcess::new(move |i, path| {
            let mut acc = alpha * path.grid().time(i);
            for (c, b) in beta.iter().enumerate() {
                acc += b * path.point(i)[c];
            }
            acc
        })
    }
}

/// A smooth test process: either a linear jet or a general candidate
/// bundled with its differential data (time drift and path gradient).
pub enum SmoothTest {
    /// `phi(s, omega) = alpha s + beta . omega_s`.
    Jet(TestJet),
    /// An arbitrary smooth functional with known derivatives: `drift` is
    /// the full parabolic drift (time derivative plus half-trace term) and
    /// `gradient` the path gradient.
    Process {
        value: ScalarProcess,
        drift: ScalarProcess,
        gradient: VectorProcess,
    },
}

impl SmoothTest {
    pub fn jet(alpha: f64, beta: Vec<f64>) -> Result<Self> {
        Ok(SmoothTest::Jet(TestJet::new(alpha, beta)?))
    }

    /// The value functional of the test process.
    pub fn value_process(&self) -> ScalarProcess {
        match self {
            SmoothTest::Jet(j) => j.process(),
            SmoothTest::Process { value, .. } => value.clone(),
        }
    }

    /// The jet coefficients frozen at a point: linear tests return their
    /// own coefficients, smooth tests evaluate their derivative data.
    pub fn jet_at(&self, point: (usize, &PathView<'_>)) -> TestJet {
        match self {
            SmoothTest::Jet(j) => j.clone(),
            SmoothTest::Process {
                drift, gradient, ..
            } => TestJet {
                alpha: drift.eval(point.0, point.1),
                beta: gradient.eval_vec(point.0, point.1),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Verdicts and reports
// ---------------------------------------------------------------------------

/// Outcome of a single statistical check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// The point estimate respects the required direction (up to round-off).
    Pass,
    /// The point estimate violates the direction but within three standard
    /// errors: indistinguishable from equality at this sample size.
    Inconclusive,
    /// The direction is violated beyond three standard errors.
    Fail,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Inconclusive => "inconclusive",
            Verdict::Fail => "fail",
        }
    }
}

/// Directional verdict for a margin that is required to be `>= 0`
/// (`sub = true`) or `<= 0` (`sub = false`).
fn direction_verdict(margin: f64, std_error: f64, sub: bool) -> Verdict {
    let m = if sub { margin } else { -margin };
    if m >= -VERDICT_SLACK {
        Verdict::Pass
    } else if m >= -(3.0 * std_error + VERDICT_SLACK) {
        Verdict::Inconclusive
    } else {
        Verdict::Fail
    }
}

/// One margin check at one sampled point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    /// Short label of the check family (mode and horizon).
    pub name: String,
    /// Sample-point identifier (index into the supplied point list, or the
    /// ensemble path for comparison rows).
    pub path: usize,
    /// Time index of the point.
    pub index: usize,
    pub time: f64,
    pub margin: f64,
    pub std_error: f64,
    pub verdict: Verdict,
}

/// Aggregated outcome of a battery of checks. Every failing entry carries
/// its own witness point and margin, so the report is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViscosityReport {
    pub checks: Vec<CheckResult>,
    pub points_sampled: usize,
    /// `Fail` if any check failed, `Pass` if all passed, `Inconclusive`
    /// otherwise.
    pub verdict: Verdict,
}

impl ViscosityReport {
    pub fn from_checks(checks: Vec<CheckResult>, points_sampled: usize) -> Self {
        let verdict = if checks.iter().any(|c| c.verdict == Verdict::Fail) {
            Verdict::Fail
        } else if checks.iter().any(|c| c.verdict == Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        ViscosityReport {
            checks,
            points_sampled,
            verdict,
        }
    }

    /// No check violated its direction beyond statistical tolerance.
    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }

    /// The check with the smallest margin, if any.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks
            .iter()
            .min_by(|a, b| a.margin.total_cmp(&b.margin))
    }

    /// One row per check: `name,point,index,time,margin,std_error,verdict`.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "name,point,index,time,margin,std_error,verdict")?;
        for c in &self.checks {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.name,
                c.path,
                c.index,
                c.time,
                c.margin,
                c.std_error,
                c.verdict.label()
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mean-tangency gap
// ---------------------------------------------------------------------------

/// Which side of the tangency family a test is probed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSide {
    /// Stopping must not push the recentred difference below zero in lower
    /// mean: `phi` dominates `u` from above near the point.
    Sub,
    /// Mirror side with the upper expectation.
    Super,
}

/// Result of a membership probe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TestGap {
    /// `<= 0` by construction; `0` means the immediate stop is optimal.
    pub gap: f64,
    pub std_error: f64,
    /// `gap >= -tol` with `tol = 3 se + floor`.
    pub member: bool,
    /// The resolved membership tolerance.
    pub tol: f64,
    /// Raw backward-envelope value (diagnostic): biased upwards because
    /// every reflection step rectifies regression noise, so the gap below
    /// is re-evaluated at the located rule instead.
    pub envelope: f64,
    /// Mean stopped time of the localizing horizon (diagnostic).
    pub horizon_mean_time: f64,
}

/// Optimal-stopping gap of a smooth test against a candidate at a point.
///
/// Simulates a conditional ensemble at `point`, recentres `phi - u` there,
/// and runs the reflected envelope on `-psi` (sub side) or `psi` (super
/// side) up to the localizing horizon `min(point + horizon_steps, exit of
/// radius `DEFAULT_LOCALIZING_RADIUS`, grid end)`.
///
/// The envelope locates the near-optimal stopping rule, but its own value
/// is biased upwards: each backward step takes a maximum against a fitted
/// continuation, rectifying regression noise, and the accumulated bias
/// does not shrink relative to the standard error as paths are added. The
/// reported gap therefore re-evaluates the stopped expectation at the
/// located rule — a suboptimal rule can only *under*-estimate the envelope
/// (second-order in the decision error), which is the admissible direction
/// for a membership test. The immediate-stop rule has value exactly zero
/// (conditional paths share the anchor prefix bit-for-bit), so the gap is
/// clamped by `min(., 0)` and the invariant `gap <= 0` is exact.
#[allow(clippy::too_many_arguments)]
pub fn test_process_gap(
    u: &ScalarProcess,
    test: &SmoothTest,
    sigma: &Diffusion,
    level: f64,
    point: (usize, &PathView<'_>),
    horizon_steps: usize,
    side: TestSide,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<TestGap> {
    let (i, omega) = point;
    let n = omega.grid().steps();
    if horizon_steps == 0 {
        return Err(Error::Precondition(
            "localizing horizon must cover at least one step".into(),
        ));
    }
    if i >= n {
        return Err(Error::Precondition(format!(
            "gap probe needs room after the point: index {i} on a grid of {n} steps"
        )));
    }
    if n_paths < 2 {
        return Err(Error::Precondition(
            "gap probe needs at least two paths".into(),
        ));
    }
    let ens = conditional_ensemble(sigma, point, n_paths, RngStream::new(seed))?;
    let phi = test.value_process();
    let diff = phi.minus(u);
    // All conditional paths carry the anchor prefix bit-for-bit, so the
    // recentred difference vanishes identically at the point.
    let at_point = diff.eval(i, &ens.path_view(0));
    let psi = diff.plus_constant(-at_point);
    let obstacle = match side {
        TestSide::Sub => psi.negated(),
        TestSide::Super => psi,
    };
    let horizon = StoppingRule::localizing(&ens, horizon_steps, DEFAULT_LOCALIZING_RADIUS);
    let horizon_mean_time = horizon.mean_time(ens.grid());
    let sol = snell_envelope(sigma, &obstacle, level, &horizon, &ens, basis)?;
    let rule = sol.rule();
    let stopped = rule.eval_process(&obstacle, &ens);
    let at_rule = nonlinear_expectation_at(sigma, &stopped, rule, level, Side::Upper, &ens, basis)?;
    let gap = (-at_rule.value).min(0.0);
    let std_error = at_rule.std_error;
    let tol = 3.0 * std_error + MEMBER_TOL_FLOOR;
    Ok(TestGap {
        gap,
        std_error,
        member: gap >= -tol,
        tol,
        envelope: sol.v0,
        horizon_mean_time,
    })
}

// ---------------------------------------------------------------------------
// Pointwise residual
// ---------------------------------------------------------------------------

/// Generator residual of a jet at a point: `-alpha - F(t, omega, u, sigma^T beta)`.
///
/// At a verified sub-side jet element, consistency of the candidate as a
/// subsolution asks this to be `<= tol`; the super side mirrors with `>=`.
pub fn subsolution_residual(
    jet: &TestJet,
    u_val: f64,
    driver: &Driver,
    sigma: &Diffusion,
    point: (usize, &PathView<'_>),
) -> Result<f64> {
    let d = sigma.dim();
    if jet.beta.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: jet.beta.len(),
        });
    }
    let (i, omega) = point;
    let zs = sigma_transpose_at(sigma, i, omega, &jet.beta);
    Ok(-jet.alpha - driver.eval(i, omega, u_val, &zs))
}

fn sigma_transpose_at(sigma: &Diffusion, i: usize, path: &PathView<'_>, v: &[f64]) -> Vec<f64> {
    let d = sigma.dim();
    let mut buf = vec![0.0; d * d];
    sigma.eval_into(i, path, &mut buf);
    let mut out = vec![0.0; d];
    Diffusion::apply_transpose(&buf, v, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Tangency-point search
// ---------------------------------------------------------------------------

/// A located point of mean tangency with its diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TangencyPoint {
    /// Ensemble path of the contact.
    pub path: usize,
    /// Time index of the contact (strictly before the horizon).
    pub index: usize,
    pub time: f64,
    /// Envelope minus candidate at the contact; `<= contact tol`.
    pub gap: f64,
    /// Candidate value at the contact.
    pub value: f64,
    /// `u(start) - upper_L[u at horizon]`; must be positive for the search
    /// to be meaningful.
    pub precondition_margin: f64,
    pub precondition_se: f64,
    /// Set when the precondition holds only within statistical noise.
    pub warned: bool,
}

/// Find a point where stopping the candidate is optimal: the earliest
/// pre-horizon contact of the optimal-stopping envelope with `u` itself.
///
/// Requires `u(start) > upper_L[u at horizon]`, checked within three
/// standard errors (a non-positive point estimate inside the noise band
/// only sets the `warned` flag). Contacts are ranked by time index first
/// and path second, so the result is deterministic.
pub fn tangency_point(
    u: &ScalarProcess,
    sigma: &Diffusion,
    level: f64,
    horizon: &StoppingRule,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<TangencyPoint> {
    let start = ens.start_index();
    let u0 = u.eval(start, &ens.path_view(0));
    let horizon_vals = horizon.eval_process(u, ens);
    let at_horizon =
        nonlinear_expectation_at(sigma, &horizon_vals, horizon, level, Side::Upper, ens, basis)?;
    let margin = u0 - at_horizon.value;
    let se = at_horizon.std_error;
    if margin < -(3.0 * se + VERDICT_SLACK) {
        return Err(Error::Precondition(format!(
            "candidate does not decay towards the horizon: u(start) = {u0}, \
             upper expectation at the horizon = {} (margin {margin} < -3 se = {})",
            at_horizon.value,
            -3.0 * se
        )));
    }
    let warned = margin <= 0.0;

    let sol = snell_envelope(sigma, u, level, horizon, ens, basis)?;
    let contact = sol.rule();
    let mut best: Option<(usize, usize)> = None;
    let mut min_gap = f64::INFINITY;
    for p in 0..ens.n_paths() {
        let h_p = horizon.index(p);
        for i in start..h_p {
            let g = sol.y_at(p, i) - sol.obstacle_at(p, i);
            if g < min_gap {
                min_gap = g;
            }
        }
        let c = contact.index(p);
        if c < h_p {
            let better = match best {
                None => true,
                Some((bi, bp)) => (c, p) < (bi, bp),
            };
            if better {
                best = Some((c, p));
            }
        }
    }
    let (index, path) = best.ok_or(Error::NoPreHorizonContact { min_gap })?;
    Ok(TangencyPoint {
        path,
        index,
        time: ens.grid().time(index),
        gap: sol.y_at(path, index) - sol.obstacle_at(path, index),
        value: u.eval(index, &ens.path_view(path)),
        precondition_margin: margin,
        precondition_se: se,
        warned,
    })
}

// ---------------------------------------------------------------------------
// Martingale certification
// ---------------------------------------------------------------------------

/// Which inequality a candidate is certified against, and under which
/// expectation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MartingaleMode {
    /// `u(point) <= E[u at rule]` under the plain conditional mean.
    MeanSub,
    /// `u(point) >= E[u at rule]` under the plain conditional mean.
    MeanSuper,
    /// `u(point) <= upper_L[u at rule]`.
    UpperSub,
    /// `u(point) >= upper_L[u at rule]` — the upper expectation bounds the
    /// candidate both ways; only the pass direction flips.
    UpperSuper,
}

impl MartingaleMode {
    pub fn label(self) -> &'static str {
        match self {
            MartingaleMode::MeanSub => "mean-sub",
            MartingaleMode::MeanSuper => "mean-super",
            MartingaleMode::UpperSub => "upper-sub",
            MartingaleMode::UpperSuper => "upper-super",
        }
    }

    fn is_sub(self) -> bool {
        matches!(self, MartingaleMode::MeanSub | MartingaleMode::UpperSub)
    }

    fn uses_upper(self) -> bool {
        matches!(self, MartingaleMode::UpperSub | MartingaleMode::UpperSuper)
    }
}

/// A sampled space-time point: a realized path and an index along it.
#[derive(Debug, Clone)]
pub struct SamplePoint {
    pub index: usize,
    pub path: DiscretePath,
}

/// Draw `count` points from a fresh base ensemble, with time indices
/// spread evenly over the interior fifth-to-four-fifths band of the grid.
/// Deterministic in `(sigma, grid, count, seed)`.
pub fn sample_points(
    sigma: &Diffusion,
    grid: TimeGrid,
    count: usize,
    seed: u64,
) -> Result<Vec<SamplePoint>> {
    if count == 0 {
        return Err(Error::Precondition("need at least one sample point".into()));
    }
    let n = grid.steps();
    if n < 2 {
        return Err(Error::Precondition(
            "sampling interior points needs at least two steps".into(),
        ));
    }
    let ens = simulate_base(sigma, grid, count, RngStream::new(seed))?;
    let lo = (n / 5).max(1);
    let hi = (4 * n / 5).max(lo).min(n - 1);
    let span = hi - lo;
    Ok((0..count)
        .map(|k| {
            let index = if count == 1 {
                lo
            } else {
                lo + (k * span) / (count - 1)
            };
            SamplePoint {
                index,
                path: ens.path(k),
            }
        })
        .collect())
}

/// Certify a directional martingale property of `u` at sampled points.
///
/// For every point and every horizon length `m`, the margin is the chosen
/// expectation of `u` at the fixed rule `min(point + m, grid end)` minus
/// `u(point)`; sub modes require it `>= 0` and super modes `<= 0`, each up
/// to three standard errors. Point `k` uses the derived seed `seed + k`,
/// so reports are deterministic and independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn martingale_property_test(
    u: &ScalarProcess,
    sigma: &Diffusion,
    level: f64,
    mode: MartingaleMode,
    points: &[SamplePoint],
    horizon_steps: &[usize],
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<ViscosityReport> {
    if horizon_steps.iter().any(|&m| m == 0) {
        return Err(Error::Precondition(
            "horizon rules must advance at least one step".into(),
        ));
    }
    let mut checks = Vec::with_capacity(points.len() * horizon_steps.len());
    for (k, pt) in points.iter().enumerate() {
        let n = pt.path.grid().steps();
        if pt.index >= n {
            return Err(Error::Precondition(format!(
                "sample point {k} sits at the grid end (index {})",
                pt.index
            )));
        }
        let ens = conditional_ensemble(
            sigma,
            (pt.index, &pt.path.view()),
            n_paths,
            RngStream::new(seed.wrapping_add(k as u64)),
        )?;
        let u_pt = u.eval(pt.index, &ens.path_view(0));
        for &m in horizon_steps {
            let rule = StoppingRule::fixed((pt.index + m).min(n), ens.n_paths());
            let vals = rule.eval_process(u, &ens);
            let (expectation, se) = if mode.uses_upper() {
                let pv =
                    nonlinear_expectation_at(sigma, &vals, &rule, level, Side::Upper, &ens, basis)?;
                (pv.value, pv.std_error)
            } else {
                weighted_mean_se(&vals, ens.weights())
            };
            let margin = expectation - u_pt;
            checks.push(CheckResult {
                name: format!("{} h={m}", mode.label()),
                path: k,
                index: pt.index,
                time: ens.grid().time(pt.index),
                margin,
                std_error: se,
                verdict: direction_verdict(margin, se, mode.is_sub()),
            });
        }
    }
    Ok(ViscosityReport::from_checks(checks, points.len()))
}

/// The drift-compensated candidate `u + sum_{j < i} (l0 |u_j| + f0_j + 1) h`.
///
/// Adding the accrued generator bound plus a unit rate turns any candidate
/// that is a subsolution against a generator with zero-order bound `l0`
/// and inhomogeneity `f0` into a strict directional submartingale under
/// the upper expectation, which `martingale_property_test` can certify.
pub fn submartingale_transform(u: &ScalarProcess, l0: f64, f0: &ScalarProcess) -> ScalarProcess {
    let u = u.clone();
    let f0 = f0.clone();
    ScalarProcess::new(move |i, path| {
        let h = path.grid().spacing();
        let mut run = 0.0;
        for j in 0..i {
            run += (l0 * u.eval(j, path).abs() + f0.eval(j, path) + 1.0) * h;
        }
        u.eval(i, path) + run
    })
}

// ---------------------------------------------------------------------------
// Punctual jets
// ---------------------------------------------------------------------------

/// Windowed estimate of the drift/gradient pair of a candidate at a point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JetEstimate {
    /// Drift quotient over the full window.
    pub alpha: f64,
    /// Window-averaged regression gradient.
    pub beta: Vec<f64>,
    pub window: usize,
    /// Standard error of the full-window drift quotient.
    pub alpha_se: f64,
    /// Per-component window-mean of the gradient standard errors
    /// (conservative: window estimates share paths and are correlated).
    pub beta_se: Vec<f64>,
    /// Largest deviation of a partial-window quotient from `alpha`.
    pub alpha_dispersion: f64,
    /// Largest distance of a per-step gradient estimate from `beta`.
    pub beta_dispersion: f64,
}

impl JetEstimate {
    /// Whether the drift quotients are stable across the window.
    pub fn low_dispersion(&self) -> bool {
        self.alpha_dispersion <= LOW_DISPERSION_FACTOR * (1.0 + self.alpha.abs())
    }
}

/// Estimate the jet of `u` at a point from a conditional ensemble.
///
/// The drift is the quotient `(mean of u at point+window - u at point) /
/// (elapsed time)`; partial-window quotients supply the dispersion
/// diagnostic. The gradient averages the per-step regression estimates of
/// `E[u_{i+k+1} dB_{i+k}] / h` over the window.
pub fn punctual_jet_estimate(
    u: &ScalarProcess,
    sigma: &Diffusion,
    point: (usize, &PathView<'_>),
    window: usize,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<JetEstimate> {
    let (i, omega) = point;
    let n = omega.grid().steps();
    if window == 0 {
        return Err(Error::Precondition("jet window must be at least 1".into()));
    }
    if i + window > n {
        return Err(Error::Precondition(format!(
            "jet window exceeds the grid: index {i} + window {window} > {n} steps"
        )));
    }
    if n_paths < 2 {
        return Err(Error::Precondition(
            "jet estimation needs at least two paths".into(),
        ));
    }
    let ens = conditional_ensemble(sigma, point, n_paths, RngStream::new(seed))?;
    let grid = ens.grid();
    let d = ens.dim();
    let u0 = u.eval(i, &ens.path_view(0));
    let t0 = grid.time(i);

    let mut columns = Vec::with_capacity(window);
    let mut quotients = Vec::with_capacity(window);
    let mut last_se = 0.0;
    for k in 1..=window {
        let col = eval_column(u, &ens, i + k);
        let (mean, se) = weighted_mean_se(&col, ens.weights());
        let dt = grid.time(i + k) - t0;
        quotients.push((mean - u0) / dt);
        if k == window {
            last_se = se / dt;
        }
        columns.push(col);
    }
    let alpha = quotients[window - 1];
    let alpha_dispersion = quotients
        .iter()
        .map(|q| (q - alpha).abs())
        .fold(0.0, f64::max);

    let mut beta = vec![0.0; d];
    let mut beta_se = vec![0.0; d];
    let mut step_means = Vec::with_capacity(window);
    for k in 0..window {
        let z = estimate_z(&ens, i + k, &columns[k], basis)?;
        for c in 0..d {
            beta[c] += z.means[c];
            beta_se[c] += z.mean_ses[c];
        }
        step_means.push(z.means);
    }
    let w = window as f64;
    for c in 0..d {
        beta[c] /= w;
        beta_se[c] /= w;
    }
    let beta_dispersion = step_means
        .iter()
        .map(|m| {
            let dev: Vec<f64> = m.iter().zip(&beta).map(|(a, b)| a - b).collect();
            norm2(&dev)
        })
        .fold(0.0, f64::max);

    Ok(JetEstimate {
        alpha,
        beta,
        window,
        alpha_se: last_se,
        beta_se,
        alpha_dispersion,
        beta_dispersion,
    })
}

fn eval_column(u: &ScalarProcess, ens: &PathEnsemble, i: usize) -> Vec<f64> {
    (0..ens.n_paths())
        .into_par_iter()
        .map(|p| u.eval(i, &ens.path_view(p)))
        .collect()
}

// ---------------------------------------------------------------------------
// Comparison experiments
// ---------------------------------------------------------------------------

/// How a candidate in a comparison is realized on the shared ensemble.
pub enum Candidate {
    /// A closed-form functional evaluated path by path (zero statistical
    /// error attributed to the evaluation itself).
    Process(ScalarProcess),
    /// A backward solve from terminal data under the given generator.
    Terminal { payoff: ScalarProcess, driver: Driver },
}

/// Sampling plan of a comparison experiment.
#[derive(Debug, Clone)]
pub struct ComparisonPlan {
    /// Number of ensemble paths whose full time slice enters the report.
    pub sample_paths: usize,
    /// Enable the difference diagnostic with this jet window (closed-form
    /// candidates only).
    pub difference_window: Option<usize>,
    /// Gradient level used by the difference-mode residual.
    pub level: f64,
    /// Conditional-ensemble size for difference-mode jets.
    pub jet_paths: usize,
    /// Slack granted to the terminal ordering check.
    pub terminal_slack: f64,
}

impl ComparisonPlan {
    pub fn new(sample_paths: usize) -> Self {
        ComparisonPlan {
            sample_paths,
            difference_window: None,
            level: 0.0,
            jet_paths: 10_000,
            terminal_slack: 1e-12,
        }
    }
}

/// Jet residual of the candidate difference at one sampled point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifferenceResidual {
    pub path: usize,
    pub index: usize,
    pub time: f64,
    /// `w = u - v` at the point.
    pub value: f64,
    /// `-alpha_w - L |w| - L |sigma^T beta_w|`; a subsolution-shaped
    /// difference keeps this nonpositive up to estimation noise.
    pub residual: f64,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub alpha_dispersion: f64,
}

/// Difference-mode diagnostics attached to a comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifferenceDiagnostics {
    pub residuals: Vec<DifferenceResidual>,
    /// Fraction of sampled points with stable drift quotients.
    pub low_dispersion_fraction: f64,
}

/// Outcome of an ordered-pair experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub report: ViscosityReport,
    pub min_margin: f64,
    pub min_margin_std_error: f64,
    pub witness_path: usize,
    pub witness_index: usize,
    pub difference: Option<DifferenceDiagnostics>,
}

struct EvaluatedCandidate {
    /// Row-major sampled values: `vals[p * (n + 1) + i]`.
    vals: Vec<f64>,
    /// Per-step fit residuals (empty for closed forms).
    rmse: Vec<f64>,
}

fn eval_candidate(
    c: &Candidate,
    sigma: &Diffusion,
    ens: &PathEnsemble,
    k_paths: usize,
    basis: &RegressionBasis,
) -> Result<EvaluatedCandidate> {
    let n = ens.grid().steps();
    match c {
        Candidate::Process(p) => {
            let vals: Vec<f64> = (0..k_paths)
                .into_par_iter()
                .flat_map_iter(|pth| {
                    let view = ens.path_view(pth);
                    (0..=n).map(move |i| p.eval(i, &view)).collect::<Vec<_>>()
                })
                .collect();
            Ok(EvaluatedCandidate {
                vals,
                rmse: Vec::new(),
            })
        }
        Candidate::Terminal { payoff, driver } => {
            let sol = solve_bsde(sigma, driver, payoff, ens, basis)?;
            let mut vals = vec![0.0; k_paths * (n + 1)];
            for p in 0..k_paths {
                for i in 0..=n {
                    vals[p * (n + 1) + i] = sol.y_at(p, i);
                }
            }
            Ok(EvaluatedCandidate {
                vals,
                rmse: sol.step_rmse,
            })
        }
    }
}

/// Evaluate an ordered candidate pair on a shared base ensemble and
/// report the margins `v - u` over `sample_paths` paths at every grid
/// index.
///
/// Terminal ordering `u <= v` is verified on the sampled paths first and
/// violations abort with the witness path. Margins of solver-built
/// candidates carry a fitted-value standard-error proxy
/// `(rmse_u + rmse_v) sqrt(features / paths)`; closed forms contribute
/// zero. With `difference_window` set (closed forms only), the jet of
/// `w = u - v` is estimated at one interior point per sampled path and the
/// gradient-level residual is reported alongside.
pub fn comparison_experiment(
    u: &Candidate,
    v: &Candidate,
    sigma: &Diffusion,
    grid: TimeGrid,
    plan: &ComparisonPlan,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<ComparisonReport> {
    let n = grid.steps();
    let k_paths = plan.sample_paths;
    if k_paths == 0 {
        return Err(Error::Precondition(
            "comparison needs at least one sampled path".into(),
        ));
    }
    if k_paths > n_paths {
        return Err(Error::Precondition(format!(
            "cannot sample {k_paths} paths from an ensemble of {n_paths}"
        )));
    }
    let ens = simulate_base(sigma, grid, n_paths, RngStream::new(seed))?;
    let eu = eval_candidate(u, sigma, &ens, k_paths, basis)?;
    let ev = eval_candidate(v, sigma, &ens, k_paths, basis)?;

    for p in 0..k_paths {
        let (ut, vt) = (eu.vals[p * (n + 1) + n], ev.vals[p * (n + 1) + n]);
        if ut > vt + plan.terminal_slack {
            return Err(Error::Precondition(format!(
                "terminal ordering violated on sampled path {p}: u = {ut}, v = {vt}"
            )));
        }
    }

    let feat = basis.feature_count(ens.dim()) as f64;
    let leverage = (feat / n_paths as f64).sqrt();
    let rmse_at = |rmse: &Vec<f64>, i: usize| -> f64 {
        if i < rmse.len() {
            rmse[i]
        } else {
            0.0
        }
    };
    let mut checks = Vec::with_capacity(k_paths * (n + 1));
    let mut min_margin = f64::INFINITY;
    let mut min_se = 0.0;
    let mut witness = (0usize, 0usize);
    for p in 0..k_paths {
        for i in 0..=n {
            let margin = ev.vals[p * (n + 1) + i] - eu.vals[p * (n + 1) + i];
            let se = (rmse_at(&eu.rmse, i) + rmse_at(&ev.rmse, i)) * leverage;
            if margin < min_margin {
                min_margin = margin;
                min_se = se;
                witness = (p, i);
            }
            checks.push(CheckResult {
                name: "v-minus-u".into(),
                path: p,
                index: i,
                time: grid.time(i),
                margin,
                std_error: se,
                verdict: direction_verdict(margin, se, true),
            });
        }
    }
    let report = ViscosityReport::from_checks(checks, k_paths);

    let difference = match plan.difference_window {
        None => None,
        Some(w) => {
            let (up, vp) = match (u, v) {
                (Candidate::Process(a), Candidate::Process(b)) => (a, b),
                _ => {
                    return Err(Error::Precondition(
                        "difference mode needs closed-form candidates on both sides".into(),
                    ))
                }
            };
            let wproc = up.minus(vp);
            let lo = (n / 5).max(1);
            let hi = (4 * n / 5).min(n.saturating_sub(w));
            if hi < lo {
                return Err(Error::Precondition(format!(
                    "grid too short for difference-mode windows of {w} steps"
                )));
            }
            let span = hi - lo;
            let mut residuals = Vec::with_capacity(k_paths);
            let mut low = 0usize;
            for k in 0..k_paths {
                let index = if k_paths == 1 {
                    lo
                } else {
                    lo + (k * span) / (k_paths - 1)
                };
                let view = ens.path_view(k);
                let jet = punctual_jet_estimate(
                    &wproc,
                    sigma,
                    (index, &view),
                    w,
                    plan.jet_paths,
                    seed.wrapping_add(k as u64 + 1),
                    basis,
                )?;
                let w_val = wproc.eval(index, &view);
                let zs = sigma_transpose_at(sigma, index, &view, &jet.beta);
                let residual = -jet.alpha - plan.level * w_val.abs() - plan.level * norm2(&zs);
                if jet.low_dispersion() {
                    low += 1;
                }
                residuals.push(DifferenceResidual {
                    path: k,
                    index,
                    time: grid.time(index),
                    value: w_val,
                    residual,
                    alpha: jet.alpha,
                    beta: jet.beta,
                    alpha_dispersion: jet.alpha_dispersion,
                });
            }
            Some(DifferenceDiagnostics {
                low_dispersion_fraction: low as f64 / k_paths as f64,
                residuals,
            })
        }
    };

    Ok(ComparisonReport {
        report,
        min_margin,
        min_margin_std_error: min_se,
        witness_path: witness.0,
        witness_index: witness.1,
        difference,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
