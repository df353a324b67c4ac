//! Least-squares Monte Carlo solver for semilinear backward SDEs
//!
//! ```text
//! Y_n = xi,
//! Z_i = argmin E| Y_{i+1} dB_i / h - <features_i> |^2,
//! C_i = E[ Y_{i+1} | F_i ]                (regression),
//! Y_i = C_i + h F(t_i, omega, C_i, sigma^T Z_i),
//! ```
//!
//! whose time-0 value discretizes the solution of the semilinear
//! path-dependent PDE with generator `F`. Conditional expectations are the
//! weighted ridge regressions of [`regression`]; the driver receives
//! `sigma^T Z`, the gradient-like slot of the generator.
//!
//! The sublinear expectation pair is the special driver `±L |sigma^T Z|`:
//! the upper expectation solves with `+L|.|`, and the lower one is defined
//! as the negation of the upper expectation of the negated target. Since
//! IEEE negation is exact and linear solves commute with negation, the
//! duality `upper(xi) = -lower(-xi)` holds bit-exactly by construction.

mod regression;

pub use regression::{regress, RegressionBasis, StepDesign, StepFit};

use crate::error::{Error, Result};
use crate::paths::{Diffusion, DriftControl, PathEnsemble, PathView, ScalarProcess};
use crate::sde::{conditional_ensemble, RngStream};
use crate::snell::StoppingRule;
use crate::util::{norm2, weighted_mean_se};
use rayon::prelude::*;
use std::io::Write;

pub use crate::paths::Driver;

/// Dense per-path, per-index solution of a backward recursion.
pub struct BsdeSolution {
    n_paths: usize,
    steps: usize,
    dim: usize,
    /// Column-major values: `y[i * n_paths + p]`.
    y: Vec<f64>,
    /// Column-major gradients: `z[(i * dim + c) * n_paths + p]`.
    z: Vec<f64>,
    /// Weighted RMS residual of the continuation regression per step.
    pub step_rmse: Vec<f64>,
    /// First index of the recursion (0 unless solved on a conditional
    /// ensemble); columns before it repeat the start column.
    pub start: usize,
    /// Collapsed value at the start index.
    pub y0: f64,
    /// Statistical error of the final collapse (standard error of the
    /// weighted mean of the last regression targets).
    pub y0_std_error: f64,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn y_at(&self, p: usize, i: usize) -> f64 {
        self.y[i * self.n_paths + p]
    }

    pub fn z_at(&self, p: usize, i: usize, c: usize) -> f64 {
        self.z[(i * self.dim + c) * self.n_paths + p]
    }

    pub fn y_column(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths..(i + 1) * self.n_paths]
    }

    fn negate_in_place(&mut self) {
        for v in self.y.iter_mut() {
            *v = -*v;
        }
        for v in self.z.iter_mut() {
            *v = -*v;
        }
        self.y0 = -self.y0;
    }

    /// CSV export: `path,index,t,y,z_0..` (gradient columns empty at the
    /// terminal index).
    pub fn write_csv(&self, grid: crate::paths::TimeGrid, out: &mut dyn Write) -> Result<()> {
        write!(out, "path,index,t,y")?;
        for c in 0..self.dim {
            write!(out, ",z{c}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for i in 0..=self.steps {
                write!(out, "{p},{i},{},{}", grid.time(i), self.y_at(p, i))?;
                for c in 0..self.dim {
                    if i < self.steps {
                        write!(out, ",{}", self.z_at(p, i, c))?;
                    } else {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Regression estimate of the gradient slot at one step: fitted values per
/// path and the collapsed means per component.
pub struct ZEstimate {
    /// Path-major fitted gradients: `values[p * dim + c]`.
    pub values: Vec<f64>,
    pub means: Vec<f64>,
    pub mean_ses: Vec<f64>,
}

/// Estimate `Z_i` by regressing `Y_{i+1} dB_i / h` on the time-`i` features.
pub fn estimate_z(
    ens: &PathEnsemble,
    i: usize,
    y_next: &[f64],
    basis: &RegressionBasis,
) -> Result<ZEstimate> {
    let design = StepDesign::build(ens, i, basis, None)?;
    estimate_z_with(&design, ens, i, y_next)
}

pub(crate) fn estimate_z_with(
    design: &StepDesign,
    ens: &PathEnsemble,
    i: usize,
    y_next: &[f64],
) -> Result<ZEstimate> {
    let d = ens.dim();
    let n_paths = ens.n_paths();
    let h = ens.grid().spacing();
    let mut values = vec![0.0f64; n_paths * d];
    let mut means = Vec::with_capacity(d);
    let mut mean_ses = Vec::with_capacity(d);
    for c in 0..d {
        let targets: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| y_next[p] * ens.increment(p, i)[c] / h)
            .collect();
        let fit = design.fit(&targets)?;
        for p in 0..n_paths {
            values[p * d + c] = fit.fitted[p];
        }
        means.push(fit.target_mean);
        mean_ses.push(fit.target_mean_se);
    }
    Ok(ZEstimate {
        values,
        means,
        mean_ses,
    })
}

fn column<'a>(buf: &'a [f64], i: usize, n_paths: usize) -> &'a [f64] {
    &buf[i * n_paths..(i + 1) * n_paths]
}

/// Backward recursion with supplied terminal data at `terminal_index`.
///
/// This is the composition primitive behind the dynamic-programming
/// identity: solving down to the ensemble's start index with terminal data
/// produced by an inner estimate realizes the two-stage value.
pub fn solve_bsde_with_terminal(
    sigma: &Diffusion,
    driver: &Driver,
    terminal_values: Vec<f64>,
    terminal_index: usize,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let n_paths = ens.n_paths();
    let n = ens.grid().steps();
    let d = ens.dim();
    let h = ens.grid().spacing();
    let start = ens.start_index();
    if terminal_values.len() != n_paths {
        return Err(Error::DimensionMismatch {
            expected: n_paths,
            got: terminal_values.len(),
        });
    }
    if terminal_index > n || terminal_index < start {
        return Err(Error::IndexOutOfRange {
            index: terminal_index,
            max: n,
        });
    }
    if let Some(p) = terminal_values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "terminal values",
            path: p,
            step: terminal_index,
        });
    }

    let mut y = vec![0.0f64; (n + 1) * n_paths];
    let mut z = vec![0.0f64; n * d * n_paths];
    let mut step_rmse = vec![0.0f64; n];
    y[terminal_index * n_paths..(terminal_index + 1) * n_paths]
        .copy_from_slice(&terminal_values);

    let mut y0 = 0.0;
    let mut y0_se = 0.0;
    if terminal_index == start {
        let (m, se) = weighted_mean_se(&terminal_values, ens.weights());
        y0 = m;
        y0_se = se;
    }

    for i in (start..terminal_index).rev() {
        let design = StepDesign::build(ens, i, basis, None)?;
        let y_next = column(&y, i + 1, n_paths).to_vec();
        let zfit = estimate_z_with(&design, ens, i, &y_next)?;
        let cont = design.fit(&y_next)?;
        step_rmse[i] = cont.weighted_rmse;

        let new_col: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let view = ens.path_view(p);
                let mut sig = vec![0.0f64; d * d];
                sigma.eval_into(i, &view, &mut sig);
                let zp = &zfit.values[p * d..(p + 1) * d];
                let mut zsig = vec![0.0f64; d];
                Diffusion::apply_transpose(&sig, zp, &mut zsig);
                let c = cont.fitted[p];
                c + h * driver.eval(i, &view, c, &zsig)
            })
            .collect();
        if let Some(p) = new_col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "backward recursion",
                path: p,
                step: i,
            });
        }
        y[i * n_paths..(i + 1) * n_paths].copy_from_slice(&new_col);
        for c in 0..d {
            let dst = &mut z[(i * d + c) * n_paths..(i * d + c + 1) * n_paths];
            for p in 0..n_paths {
                dst[p] = zfit.values[p * d + c];
            }
        }
        if i == start {
            y0 = weighted_mean_se(&new_col, ens.weights()).0;
            y0_se = cont.target_mean_se;
        }
    }

    // columns outside [start, terminal_index] repeat the boundary columns
    for i in 0..start {
        let src = column(&y, start, n_paths).to_vec();
        y[i * n_paths..(i + 1) * n_paths].copy_from_slice(&src);
    }
    for i in (terminal_index + 1)..=n {
        let src = column(&y, terminal_index, n_paths).to_vec();
        y[i * n_paths..(i + 1) * n_paths].copy_from_slice(&src);
    }

    Ok(BsdeSolution {
        n_paths,
        steps: n,
        dim: d,
        y,
        z,
        step_rmse,
        start,
        y0,
        y0_std_error: y0_se,
    })
}

/// Solve the backward SDE with terminal condition `xi` (evaluated at the
/// last grid index) down to the ensemble's start index.
pub fn solve_bsde(
    sigma: &Diffusion,
    driver: &Driver,
    terminal: &ScalarProcess,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let n = ens.grid().steps();
    let xi: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| terminal.eval(n, &ens.path_view(p)))
        .collect();
    solve_bsde_with_terminal(sigma, driver, xi, n, ens, basis)
}

/// Which of the sublinear expectation pair to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

/// Sublinear expectation of `xi` over drift perturbations bounded by
/// `level`: the backward solve with driver `+level * |sigma^T Z|`; the lower
/// side is the exact negation of the upper side of `-xi`.
pub fn nonlinear_expectation(
    sigma: &Diffusion,
    target: &ScalarProcess,
    level: f64,
    side: Side,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    if !(level >= 0.0) {
        return Err(Error::Precondition(format!(
            "expectation level must be nonnegative, got {level}"
        )));
    }
    match side {
        Side::Upper => {
            let driver = Driver::new(move |_, _, _, z| level * norm2(z));
            solve_bsde(sigma, &driver, target, ens, basis)
        }
        Side::Lower => {
            let mut sol =
                nonlinear_expectation(sigma, &target.negated(), level, Side::Upper, ens, basis)?;
            sol.negate_in_place();
            Ok(sol)
        }
    }
}

/// Scalar value with its standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PointValue {
    pub value: f64,
    pub std_error: f64,
}

/// Sublinear expectation of a target *observed at a stopping rule*: the
/// recursion freezes each path at its rule index, regressions run on the
/// still-running paths only, and no driver accrues after stopping.
///
/// With `level = 0` the nested conditional means telescope to the plain
/// weighted mean, which is then computed directly.
pub fn nonlinear_expectation_at(
    sigma: &Diffusion,
    values_at_rule: &[f64],
    rule: &StoppingRule,
    level: f64,
    side: Side,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<PointValue> {
    if !(level >= 0.0) {
        return Err(Error::Precondition(format!(
            "expectation level must be nonnegative, got {level}"
        )));
    }
    let n_paths = ens.n_paths();
    if values_at_rule.len() != n_paths || rule.len() != n_paths {
        return Err(Error::DimensionMismatch {
            expected: n_paths,
            got: values_at_rule.len().min(rule.len()),
        });
    }
    match side {
        Side::Lower => {
            let neg: Vec<f64> = values_at_rule.iter().map(|v| -v).collect();
            let up = nonlinear_expectation_at(sigma, &neg, rule, level, Side::Upper, ens, basis)?;
            Ok(PointValue {
                value: -up.value,
                std_error: up.std_error,
            })
        }
        Side::Upper => {
            if level == 0.0 {
                let (m, se) = weighted_mean_se(values_at_rule, ens.weights());
                return Ok(PointValue {
                    value: m,
                    std_error: se,
                });
            }
            let n = ens.grid().steps();
            let d = ens.dim();
            let h = ens.grid().spacing();
            let start = ens.start_index();
            let mut y: Vec<f64> = values_at_rule.to_vec();
            let mut last_se: Option<f64> = None;
            for i in (start..n).rev() {
                let alive: Vec<bool> = (0..n_paths).map(|p| rule.index(p) > i).collect();
                if !alive.iter().any(|a| *a) {
                    continue;
                }
                let design = StepDesign::build(ens, i, basis, Some(&alive))?;
                let zfit = estimate_z_with(&design, ens, i, &y)?;
                let cont = design.fit(&y)?;
                let new_y: Vec<f64> = (0..n_paths)
                    .into_par_iter()
                    .map(|p| {
                        if !alive[p] {
                            return y[p];
                        }
                        let view = ens.path_view(p);
                        let mut sig = vec![0.0f64; d * d];
                        sigma.eval_into(i, &view, &mut sig);
                        let zp = &zfit.values[p * d..(p + 1) * d];
                        let mut zsig = vec![0.0f64; d];
                        Diffusion::apply_transpose(&sig, zp, &mut zsig);
                        cont.fitted[p] + h * level * norm2(&zsig)
                    })
                    .collect();
                y = new_y;
                if let Some(p) = y.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "stopped expectation recursion",
                        path: p,
                        step: i,
                    });
                }
                if i == start {
                    last_se = Some(cont.target_mean_se);
                }
            }
            let (m, col_se) = weighted_mean_se(&y, ens.weights());
            Ok(PointValue {
                value: m,
                std_error: last_se.unwrap_or(col_se),
            })
        }
    }
}

/// Linear drift expectation: the backward solve with driver `z . lambda`,
/// i.e. the expectation under the drift-perturbed measure for a specific
/// admissible control (a lower bound for the upper expectation at the same
/// bound).
pub fn drift_expectation(
    sigma: &Diffusion,
    target: &ScalarProcess,
    control: &DriftControl,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let ctrl = control.clone();
    let driver = Driver::new(move |i, w, _, z| {
        let mut lam = vec![0.0f64; z.len()];
        // bound already validated at construction; evaluation is checked in
        // simulation, here we only consume the values
        ctrl.eval_unchecked(i, w, &mut lam);
        lam.iter().zip(z).map(|(l, zc)| l * zc).sum()
    });
    solve_bsde(sigma, &driver, target, ens, basis)
}

/// The value functional at a space-time point: simulate a conditional
/// ensemble at `(i, omega)` and solve the backward SDE on the suffix. At
/// the terminal index the value is the payoff itself (computed exactly).
pub fn value_functional(
    sigma: &Diffusion,
    driver: &Driver,
    terminal: &ScalarProcess,
    point: (usize, &PathView<'_>),
    n_paths: usize,
    stream: RngStream,
    basis: &RegressionBasis,
) -> Result<PointValue> {
    let (i, omega) = point;
    let n = omega.grid().steps();
    if i == n {
        return Ok(PointValue {
            value: terminal.eval(n, omega),
            std_error: 0.0,
        });
    }
    let ens = conditional_ensemble(sigma, (i, omega), n_paths, stream)?;
    let sol = solve_bsde(sigma, driver, terminal, &ens, basis)?;
    Ok(PointValue {
        value: sol.y0,
        std_error: sol.y0_std_error,
    })
}

/// Dynamic-programming consistency diagnostic.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DppResidual {
    /// `|direct - composed|`.
    pub residual: f64,
    /// Combined standard error of the two estimates.
    pub std_error: f64,
    pub direct: f64,
    pub composed: f64,
}

/// Compare the direct value at `(i, omega)` against the two-stage value:
/// an inner estimate at the intermediate index `j` on every suffix path,
/// then the backward solve on `[i, j]` with those estimates as terminal
/// data. All stages reuse the same seed, so `j == i` composes to the
/// direct estimate identically and the residual is zero by construction.
///
/// Cost scales as `n_paths` inner solves; intended at diagnostic scales.
pub fn dpp_residual(
    sigma: &Diffusion,
    driver: &Driver,
    terminal: &ScalarProcess,
    point: (usize, &PathView<'_>),
    j: usize,
    n_paths: usize,
    stream: RngStream,
    basis: &RegressionBasis,
) -> Result<DppResidual> {
    let (i, omega) = point;
    let n = omega.grid().steps();
    if j < i || j > n {
        return Err(Error::IndexOutOfRange { index: j, max: n });
    }
    let direct = value_functional(sigma, driver, terminal, point, n_paths, stream, basis)?;
    if j == i {
        return Ok(DppResidual {
            residual: 0.0,
            std_error: 0.0,
            direct: direct.value,
            composed: direct.value,
        });
    }
    let ens = conditional_ensemble(sigma, (i, omega), n_paths, stream)?;
    let inner: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let view = ens.path_view(p);
            if j == n {
                Ok(terminal.eval(n, &view))
            } else {
                Ok(
                    value_functional(sigma, driver, terminal, (j, &view), n_paths, stream, basis)?
                        .value,
                )
            }
        })
        .collect();
    let mut w = Vec::with_capacity(n_paths);
    for r in inner {
        w.push(r?);
    }
    let sol = solve_bsde_with_terminal(sigma, driver, w, j, &ens, basis)?;
    let residual = (direct.value - sol.y0).abs();
    let std_error = (direct.std_error.powi(2) + sol.y0_std_error.powi(2)).sqrt();
    Ok(DppResidual {
        residual,
        std_error,
        direct: direct.value,
        composed: sol.y0,
    })
}
