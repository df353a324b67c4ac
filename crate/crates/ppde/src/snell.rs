//! Optimal stopping under the sublinear expectation.
//!
//! The Snell envelope of an obstacle process `X` stopped at a per-path
//! horizon rule `H` is computed by reflected backward induction:
//!
//! ```text
//! Y_H = X_H,
//! C_i = E[Y_{i+1} | F_i] + h L |sigma^T Z_i|,
//! Y_i = max(X_i, C_i),    dK_i = Y_i - C_i  (= (X_i - C_i)^+, exact),
//! ```
//!
//! so the barrier and Skorokhod conditions (`Y >= X`, `dK > 0` only at
//! contact `Y = X`) hold exactly by construction. `Y_0` estimates the value
//! `sup_tau upper-expectation[X_tau]`, and the first-contact rule attains
//! it. The upper-barrier variant reflects downward (`Y_i = min(u_i, C_i)`)
//! and computes `inf_tau upper-expectation[u_tau]`.
//!
//! A binary-tree oracle (`+-sqrt(h)` increments, exact one-step sublinear
//! expectations) cross-validates the recursion at small depth, including
//! exhaustive enumeration of all adapted stopping rules up to depth 4, and
//! a "tree-exact" mode runs the Monte-Carlo recursion with exact
//! prefix-group conditional expectations in place of regression.

use crate::bsde::{estimate_z_with, RegressionBasis, StepDesign};
use crate::error::{Error, Result};
use crate::paths::{
    Diffusion, DiscretePath, IncrementSource, MeasureTag, PathEnsemble, ScalarProcess, TimeGrid,
};
use crate::util::weighted_mean_se;
use rayon::prelude::*;
use std::io::Write;

/// Default absolute tolerance for detecting envelope/obstacle contact.
pub const DEFAULT_CONTACT_TOL: f64 = 1e-9;

/// Maximum depth for the binary-tree oracle's backward induction.
pub const MAX_TREE_DEPTH: usize = 12;
/// Maximum depth for exhaustive enumeration of adapted stopping rules.
pub const MAX_ENUMERATION_DEPTH: usize = 4;

/// A grid-valued stopping rule: one stopping index per path.
///
/// Construction from a predicate trusts the predicate to be adapted (it
/// receives the full path and must only read indices `<= i`); use
/// [`crate::paths::probe_adapted`] to spot-check functionals it reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingRule {
    indices: Vec<usize>,
}

impl StoppingRule {
    /// The deterministic rule stopping every path at `index`.
    pub fn fixed(index: usize, n_paths: usize) -> Self {
        StoppingRule {
            indices: vec![index; n_paths],
        }
    }

    /// A rule from explicit per-path indices, validated against the grid.
    pub fn from_indices(indices: Vec<usize>, steps: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i > steps) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                max: steps,
            });
        }
        Ok(StoppingRule { indices })
    }

    /// First index `>= start` at which the predicate holds, else the
    /// terminal index.
    pub fn from_predicate(
        ens: &PathEnsemble,
        pred: impl Fn(usize, &crate::paths::PathView<'_>) -> bool + Send + Sync,
    ) -> Self {
        let n = ens.grid().steps();
        let start = ens.start_index();
        let indices: Vec<usize> = (0..ens.n_paths())
            .into_par_iter()
            .map(|p| {
                let view = ens.path_view(p);
                (start..=n).find(|&i| pred(i, &view)).unwrap_or(n)
            })
            .collect();
        StoppingRule { indices }
    }

    /// Localizing rule: the earlier of `start + max_steps` and the first
    /// index after the start where the path has moved at least `radius`
    /// from its start value (Euclidean), capped at the horizon.
    pub fn localizing(ens: &PathEnsemble, max_steps: usize, radius: f64) -> Self {
        let n = ens.grid().steps();
        let start = ens.start_index();
        let d = ens.dim();
        let cap = start.saturating_add(max_steps).min(n);
        let indices: Vec<usize> = (0..ens.n_paths())
            .into_par_iter()
            .map(|p| {
                let view = ens.path_view(p);
                let anchor = view.point(start);
                let exited = (start + 1..=cap).find(|&i| {
                    let pt = view.point(i);
                    let dist2: f64 = (0..d).map(|c| (pt[c] - anchor[c]).powi(2)).sum();
                    dist2.sqrt() >= radius
                });
                exited.unwrap_or(cap)
            })
            .collect();
        StoppingRule { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, p: usize) -> usize {
        self.indices[p]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn max_index(&self) -> usize {
        self.indices.iter().copied().max().unwrap_or(0)
    }

    pub fn min_index(&self) -> usize {
        self.indices.iter().copied().min().unwrap_or(0)
    }

    /// Unweighted average stopping time.
    pub fn mean_time(&self, grid: TimeGrid) -> f64 {
        if self.indices.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.indices.iter().map(|&i| grid.time(i)).sum();
        sum / self.indices.len() as f64
    }

    /// Evaluate a process at the rule: `f(tau_p, omega_p)` per path.
    pub fn eval_process(&self, f: &ScalarProcess, ens: &PathEnsemble) -> Vec<f64> {
        (0..ens.n_paths())
            .into_par_iter()
            .map(|p| f.eval(self.indices[p], &ens.path_view(p)))
            .collect()
    }
}

/// Which side of the obstacle the envelope is reflected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reflect {
    /// `Y = max(X, C)`: envelope above a lower obstacle (supremum value).
    Below,
    /// `Y = min(u, C)`: envelope below an upper barrier (infimum value).
    Above,
}

/// Reflected backward solution.
pub struct SnellSolution {
    n_paths: usize,
    steps: usize,
    start: usize,
    /// Column-major envelope values `y[i * n_paths + p]`.
    y: Vec<f64>,
    /// Column-major stopped obstacle values (frozen past each path's
    /// horizon index).
    obstacle: Vec<f64>,
    /// Column-major reflection increments `k[i * n_paths + p]`, one per
    /// step `i < n`.
    k: Vec<f64>,
    horizon: StoppingRule,
    /// First-contact rule at [`DEFAULT_CONTACT_TOL`].
    rule: StoppingRule,
    /// Value estimate at the start index with its standard error.
    pub v0: f64,
    pub v0_std_error: f64,
}

impl SnellSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn y_at(&self, p: usize, i: usize) -> f64 {
        self.y[i * self.n_paths + p]
    }

    pub fn y_column(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths..(i + 1) * self.n_paths]
    }

    /// Stopped obstacle value (frozen past the horizon index).
    pub fn obstacle_at(&self, p: usize, i: usize) -> f64 {
        self.obstacle[i * self.n_paths + p]
    }

    pub fn k_at(&self, p: usize, i: usize) -> f64 {
        self.k[i * self.n_paths + p]
    }

    pub fn horizon(&self) -> &StoppingRule {
        &self.horizon
    }

    /// The stored first-contact stopping rule.
    pub fn rule(&self) -> &StoppingRule {
        &self.rule
    }

    /// CSV export: `path,index,t,y,x,dk,stopped`.
    pub fn write_csv(&self, grid: TimeGrid, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "path,index,t,y,x,dk,stopped")?;
        for p in 0..self.n_paths {
            for i in 0..=self.steps {
                let dk = if i < self.steps {
                    self.k_at(p, i)
                } else {
                    0.0
                };
                writeln!(
                    out,
                    "{p},{i},{},{},{},{},{}",
                    grid.time(i),
                    self.y_at(p, i),
                    self.obstacle_at(p, i),
                    dk,
                    (i >= self.rule.index(p)) as u8
                )?;
            }
        }
        Ok(())
    }
}

/// First index (from the start, capped at the horizon rule) where the
/// envelope touches the obstacle within `contact_tol` (absolute). Contact
/// at the horizon is guaranteed since `Y = X` there.
pub fn optimal_stopping_rule(sol: &SnellSolution, contact_tol: f64) -> StoppingRule {
    let n_paths = sol.n_paths;
    let indices: Vec<usize> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let cap = sol.horizon.index(p);
            (sol.start..=cap)
                .find(|&i| {
                    (sol.y[i * n_paths + p] - sol.obstacle[i * n_paths + p]).abs() <= contact_tol
                })
                .unwrap_or(cap)
        })
        .collect();
    StoppingRule { indices }
}

fn reflected_backward(
    sigma: &Diffusion,
    obstacle: &ScalarProcess,
    level: f64,
    horizon: &StoppingRule,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    reflect: Reflect,
) -> Result<SnellSolution> {
    if !(level >= 0.0) {
        return Err(Error::Precondition(format!(
            "expectation level must be nonnegative, got {level}"
        )));
    }
    let n_paths = ens.n_paths();
    let n = ens.grid().steps();
    let d = ens.dim();
    let h = ens.grid().spacing();
    let start = ens.start_index();
    if horizon.len() != n_paths {
        return Err(Error::DimensionMismatch {
            expected: n_paths,
            got: horizon.len(),
        });
    }
    if horizon.max_index() > n {
        return Err(Error::IndexOutOfRange {
            index: horizon.max_index(),
            max: n,
        });
    }
    if horizon.min_index() < start {
        return Err(Error::Precondition(format!(
            "horizon rule stops at index {} before the ensemble start {start}",
            horizon.min_index()
        )));
    }

    // raw obstacle values, column by column
    let mut x = vec![0.0f64; (n + 1) * n_paths];
    for i in 0..=n {
        let col = &mut x[i * n_paths..(i + 1) * n_paths];
        col.par_iter_mut().enumerate().for_each(|(p, slot)| {
            *slot = obstacle.eval(i, &ens.path_view(p));
        });
        if let Some(p) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "obstacle",
                path: p,
                step: i,
            });
        }
    }
    // freeze past the horizon: X_{i ∧ H_p}
    for i in 1..=n {
        let (done, rest) = x.split_at_mut(i * n_paths);
        let col = &mut rest[..n_paths];
        col.par_iter_mut().enumerate().for_each(|(p, slot)| {
            let hp = horizon.index(p);
            if i > hp {
                *slot = done[hp * n_paths + p];
            }
        });
    }

    let mut y = vec![0.0f64; (n + 1) * n_paths];
    let mut k = vec![0.0f64; n * n_paths];
    y[n * n_paths..].copy_from_slice(&x[n * n_paths..]);

    let mut v0_se = 0.0f64;
    for i in (start..n).rev() {
        let alive: Vec<bool> = (0..n_paths).map(|p| horizon.index(p) > i).collect();
        let any_alive = alive.iter().any(|a| *a);
        let y_next = y[(i + 1) * n_paths..(i + 2) * n_paths].to_vec();
        let (new_col, k_col) = if any_alive {
            let design = StepDesign::build(ens, i, basis, Some(&alive))?;
            let zfit = estimate_z_with(&design, ens, i, &y_next)?;
            let cont = design.fit(&y_next)?;
            if i == start {
                v0_se = cont.target_mean_se;
            }
            let x_col = &x[i * n_paths..(i + 1) * n_paths];
            let pairs: Vec<(f64, f64)> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    if !alive[p] {
                        return (y_next[p], 0.0);
                    }
                    let view = ens.path_view(p);
                    let mut sig = vec![0.0f64; d * d];
                    sigma.eval_into(i, &view, &mut sig);
                    let zp = &zfit.values[p * d..(p + 1) * d];
                    let mut zsig = vec![0.0f64; d];
                    Diffusion::apply_transpose(&sig, zp, &mut zsig);
                    let cp = cont.fitted[p] + h * level * crate::util::norm2(&zsig);
                    match reflect {
                        Reflect::Below => {
                            let yv = x_col[p].max(cp);
                            (yv, yv - cp)
                        }
                        Reflect::Above => {
                            let yv = x_col[p].min(cp);
                            (yv, cp - yv)
                        }
                    }
                })
                .collect();
            let new_col: Vec<f64> = pairs.iter().map(|&(a, _)| a).collect();
            let k_col: Vec<f64> = pairs.iter().map(|&(_, b)| b).collect();
            (new_col, k_col)
        } else {
            (y_next, vec![0.0f64; n_paths])
        };
        if let Some(p) = new_col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "reflected recursion",
                path: p,
                step: i,
            });
        }
        y[i * n_paths..(i + 1) * n_paths].copy_from_slice(&new_col);
        k[i * n_paths..(i + 1) * n_paths].copy_from_slice(&k_col);
    }
    // columns before the start repeat the start column
    for i in 0..start {
        let src = y[start * n_paths..(start + 1) * n_paths].to_vec();
        y[i * n_paths..(i + 1) * n_paths].copy_from_slice(&src);
        let xs = x[start * n_paths..(start + 1) * n_paths].to_vec();
        x[i * n_paths..(i + 1) * n_paths].copy_from_slice(&xs);
    }

    let (v0, col_se) = weighted_mean_se(&y[start * n_paths..(start + 1) * n_paths], ens.weights());
    let any_backward = horizon.max_index() > start;
    let mut sol = SnellSolution {
        n_paths,
        steps: n,
        start,
        y,
        obstacle: x,
        k,
        horizon: horizon.clone(),
        rule: StoppingRule {
            indices: Vec::new(),
        },
        v0,
        v0_std_error: if any_backward { v0_se } else { col_se },
    };
    sol.rule = optimal_stopping_rule(&sol, DEFAULT_CONTACT_TOL);
    Ok(sol)
}

/// Snell envelope of the obstacle stopped at `horizon`: the maximal value
/// of stopping under the upper expectation at the given `level`.
pub fn snell_envelope(
    sigma: &Diffusion,
    obstacle: &ScalarProcess,
    level: f64,
    horizon: &StoppingRule,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<SnellSolution> {
    reflected_backward(sigma, obstacle, level, horizon, ens, basis, Reflect::Below)
}

/// Upper-barrier variant: `Y_i = min(u_i, C_i)` computes
/// `inf_tau upper-expectation[u_tau]` over the full horizon; the increments
/// `dK = (C - Y)^+` are positive only at barrier contact.
pub fn upper_snell_envelope(
    sigma: &Diffusion,
    barrier: &ScalarProcess,
    level: f64,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<SnellSolution> {
    let horizon = StoppingRule::fixed(ens.grid().steps(), ens.n_paths());
    reflected_backward(sigma, barrier, level, &horizon, ens, basis, Reflect::Above)
}

// ---------------------------------------------------------------------------
// Binary-tree oracle
// ---------------------------------------------------------------------------

/// Exact binary-tree solution: backward induction values per level, the
/// first-contact rule per tree path, and (at depth <= 4) the maximum over
/// exhaustively enumerated adapted stopping rules.
pub struct TreeSnell {
    pub depth: usize,
    /// Root value from backward induction.
    pub value: f64,
    /// Maximum over all adapted stopping rules (populated for depth <= 4).
    pub enumerated: Option<f64>,
    /// `node_values[i][b]` is the envelope at level `i`, node bits `b`.
    pub node_values: Vec<Vec<f64>>,
    /// First-contact stopping index per tree path (path `p` takes an up
    /// step at level `i` iff bit `depth-1-i` of `p` is set).
    pub stop_indices: Vec<usize>,
}

/// One-step sublinear expectation on the tree: the exact supremum over
/// drift reweightings of a `+-sqrt(h)` step at the given level.
#[inline]
fn tree_step(up: f64, down: f64, level: f64, sqrt_h: f64) -> f64 {
    (up + down) / 2.0 + level * sqrt_h * (up - down).abs() / 2.0
}

/// Path of a tree node as a full-length scalar path frozen after level
/// `i`: step `k < i` is `+sqrt(h)` iff bit `i-1-k` of `bits` is set.
fn tree_node_path(grid: TimeGrid, i: usize, bits: usize, sqrt_h: f64) -> DiscretePath {
    let n = grid.steps();
    let mut values = vec![0.0f64; n + 1];
    for k in 0..i {
        let sign = if (bits >> (i - 1 - k)) & 1 == 1 {
            1.0
        } else {
            -1.0
        };
        values[k + 1] = values[k] + sign * sqrt_h;
    }
    for k in i..n {
        values[k + 1] = values[k];
    }
    DiscretePath::new(grid, 1, values).expect("tree path construction is always valid")
}

/// Backward induction on the full binary tree of the given depth, with
/// exhaustive enumeration of all adapted stopping rules at depth <= 4.
/// The diffusion is the identity; increments are `+-sqrt(h)`.
pub fn brute_force_snell_tree(
    obstacle: &ScalarProcess,
    level: f64,
    depth: usize,
    horizon: f64,
) -> Result<TreeSnell> {
    if depth == 0 || depth > MAX_TREE_DEPTH {
        return Err(Error::TreeDepth {
            depth,
            max: MAX_TREE_DEPTH,
        });
    }
    if !(level >= 0.0) {
        return Err(Error::Precondition(format!(
            "expectation level must be nonnegative, got {level}"
        )));
    }
    let grid = TimeGrid::new(horizon, depth)?;
    let sqrt_h = grid.spacing().sqrt();

    // obstacle at every node
    let mut x_nodes: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    for i in 0..=depth {
        let vals: Vec<f64> = (0..(1usize << i))
            .into_par_iter()
            .map(|bits| {
                let path = tree_node_path(grid, i, bits, sqrt_h);
                obstacle.eval(i, &path.view())
            })
            .collect();
        if let Some(b) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tree obstacle",
                path: b,
                step: i,
            });
        }
        x_nodes.push(vals);
    }

    // backward induction
    let mut node_values: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    node_values[depth] = x_nodes[depth].clone();
    for i in (0..depth).rev() {
        let next = &node_values[i + 1];
        node_values[i] = (0..(1usize << i))
            .map(|b| {
                let cont = tree_step(next[2 * b + 1], next[2 * b], level, sqrt_h);
                x_nodes[i][b].max(cont)
            })
            .collect();
    }
    let value = node_values[0][0];

    // first contact per tree path
    let n_tree_paths = 1usize << depth;
    let stop_indices: Vec<usize> = (0..n_tree_paths)
        .map(|p| {
            (0..=depth)
                .find(|&i| {
                    let bits = p >> (depth - i);
                    node_values[i][bits] <= x_nodes[i][bits]
                })
                .unwrap_or(depth)
        })
        .collect();

    // exhaustive enumeration over adapted rules: one stop/continue bit per
    // internal node, 2^(2^depth - 1) rules
    let enumerated = if depth <= MAX_ENUMERATION_DEPTH {
        let n_internal = (1usize << depth) - 1;
        let node_id = |i: usize, b: usize| ((1usize << i) - 1) + b;
        let best = (0u64..(1u64 << n_internal))
            .into_par_iter()
            .map(|rule| {
                let mut w = x_nodes[depth].clone();
                for i in (0..depth).rev() {
                    let mut next = Vec::with_capacity(1 << i);
                    for b in 0..(1usize << i) {
                        let stopped = (rule >> node_id(i, b)) & 1 == 1;
                        next.push(if stopped {
                            x_nodes[i][b]
                        } else {
                            tree_step(w[2 * b + 1], w[2 * b], level, sqrt_h)
                        });
                    }
                    w = next;
                }
                w[0]
            })
            .reduce(|| f64::NEG_INFINITY, f64::max);
        Some(best)
    } else {
        None
    };

    Ok(TreeSnell {
        depth,
        value,
        enumerated,
        node_values,
        stop_indices,
    })
}

/// Deterministic ensemble of all `2^depth` binary-tree paths with
/// `+-sqrt(h)` increments (path `p` steps up at `i` iff bit `depth-1-i`
/// of `p` is set), unit weights.
pub fn tree_ensemble(horizon: f64, depth: usize) -> Result<PathEnsemble> {
    if depth == 0 || depth > MAX_TREE_DEPTH {
        return Err(Error::TreeDepth {
            depth,
            max: MAX_TREE_DEPTH,
        });
    }
    let grid = TimeGrid::new(horizon, depth)?;
    let sqrt_h = grid.spacing().sqrt();
    let n_paths = 1usize << depth;
    let mut values = vec![0.0f64; n_paths * (depth + 1)];
    let mut increments = vec![0.0f64; n_paths * depth];
    for p in 0..n_paths {
        for i in 0..depth {
            let sign = if (p >> (depth - 1 - i)) & 1 == 1 {
                1.0
            } else {
                -1.0
            };
            let delta = sign * sqrt_h;
            increments[p * depth + i] = delta;
            values[p * (depth + 1) + i + 1] = values[p * (depth + 1) + i] + delta;
        }
    }
    PathEnsemble::from_parts(
        grid,
        1,
        n_paths,
        values,
        increments,
        vec![1.0; n_paths],
        0,
        MeasureTag::Base,
        IncrementSource::PathDifferences,
    )
}

/// The Monte-Carlo reflected recursion run on a tree ensemble with the
/// regression replaced by exact prefix-group conditional expectations
/// (paths sharing their first `i` steps form contiguous blocks). The step
/// formula matches [`brute_force_snell_tree`] operation for operation, so
/// agreement is to round-off. Identity diffusion, full horizon.
pub fn snell_envelope_tree_exact(
    obstacle: &ScalarProcess,
    level: f64,
    ens: &PathEnsemble,
) -> Result<SnellSolution> {
    if !(level >= 0.0) {
        return Err(Error::Precondition(format!(
            "expectation level must be nonnegative, got {level}"
        )));
    }
    let n = ens.grid().steps();
    let n_paths = ens.n_paths();
    if ens.dim() != 1 || n_paths != (1usize << n) {
        return Err(Error::Precondition(format!(
            "tree-exact mode needs a depth-{n} tree ensemble (2^{n} scalar paths), got {n_paths}"
        )));
    }
    let sqrt_h = ens.grid().spacing().sqrt();

    let mut x = vec![0.0f64; (n + 1) * n_paths];
    for i in 0..=n {
        let col = &mut x[i * n_paths..(i + 1) * n_paths];
        col.par_iter_mut().enumerate().for_each(|(p, slot)| {
            *slot = obstacle.eval(i, &ens.path_view(p));
        });
        if let Some(p) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "obstacle",
                path: p,
                step: i,
            });
        }
    }

    let mut y = vec![0.0f64; (n + 1) * n_paths];
    let mut k = vec![0.0f64; n * n_paths];
    y[n * n_paths..].copy_from_slice(&x[n * n_paths..]);
    for i in (0..n).rev() {
        let group = 1usize << (n - i); // paths sharing the first i steps
        let half = group / 2;
        let (y_new, y_done) = y.split_at_mut((i + 1) * n_paths);
        let y_next = &y_done[..n_paths];
        let x_col = &x[i * n_paths..(i + 1) * n_paths];
        let k_col = &mut k[i * n_paths..(i + 1) * n_paths];
        let y_col = &mut y_new[i * n_paths..(i + 1) * n_paths];
        y_col
            .par_chunks_mut(group)
            .zip(k_col.par_chunks_mut(group))
            .enumerate()
            .for_each(|(g, (yc, kc))| {
                let base = g * group;
                // within the block, the first half took a down step (bit 0)
                // and the second half an up step; values are constant on
                // each half
                let down = y_next[base];
                let up = y_next[base + half];
                let cont = tree_step(up, down, level, sqrt_h);
                for j in 0..group {
                    let yv = x_col[base + j].max(cont);
                    yc[j] = yv;
                    kc[j] = yv - cont;
                }
            });
    }

    let (v0, _) = weighted_mean_se(&y[..n_paths], ens.weights());
    let horizon = StoppingRule::fixed(n, n_paths);
    let mut sol = SnellSolution {
        n_paths,
        steps: n,
        start: 0,
        y,
        obstacle: x,
        k,
        horizon,
        rule: StoppingRule {
            indices: Vec::new(),
        },
        v0,
        // exact conditional expectations: no regression error
        v0_std_error: 0.0,
    };
    sol.rule = optimal_stopping_rule(&sol, DEFAULT_CONTACT_TOL);
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{nonlinear_expectation_at, RegressionBasis, Side};
    use crate::paths::{Diffusion, ScalarProcess};
    use crate::sde::{simulate_base, RngStream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn basis() -> RegressionBasis {
        RegressionBasis::new(3)
    }

    fn base(n: usize, n_paths: usize, seed: u64) -> crate::paths::PathEnsemble {
        let grid = crate::paths::TimeGrid::new(1.0, n).unwrap();
        simulate_base(&Diffusion::identity(1), grid, n_paths, RngStream::new(seed)).unwrap()
    }

    #[test]
    fn decreasing_obstacle_stops_immediately() {
        let ens = base(20, 500, 7);
        let obstacle = ScalarProcess::new(|i, w| -w.grid().time(i));
        let horizon = StoppingRule::fixed(20, 500);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.0,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.v0, 0.0, epsilon = 1e-10);
        for p in 0..500 {
            assert_eq!(sol.rule().index(p), 0);
            // constant-in-path obstacle: regressions exact, envelope equals
            // the obstacle everywhere
            for i in 0..=20 {
                assert_abs_diff_eq!(sol.y_at(p, i), sol.obstacle_at(p, i), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn increasing_obstacle_waits_to_the_end() {
        let ens = base(20, 500, 8);
        let obstacle = ScalarProcess::new(|i, w| w.grid().time(i));
        let horizon = StoppingRule::fixed(20, 500);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.0,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.v0, 1.0, epsilon = 1e-10);
        for p in 0..500 {
            assert_eq!(sol.rule().index(p), 20);
            for i in 0..20 {
                assert_abs_diff_eq!(sol.y_at(p, i), 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn skorokhod_and_barrier_hold_exactly() {
        let ens = base(30, 4000, 9);
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i).abs());
        let horizon = StoppingRule::fixed(30, 4000);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.5,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        for p in 0..4000 {
            let tau = sol.rule().index(p);
            for i in 0..=30 {
                assert!(sol.y_at(p, i) >= sol.obstacle_at(p, i));
            }
            assert_eq!(sol.y_at(p, 30), sol.obstacle_at(p, 30));
            for i in 0..30 {
                let dk = sol.k_at(p, i);
                assert!(dk >= 0.0);
                if dk > 0.0 {
                    // reflection implies exact contact
                    assert_eq!(sol.y_at(p, i), sol.obstacle_at(p, i));
                    assert!(i >= tau, "dk > 0 strictly before first contact");
                }
            }
        }
    }

    #[test]
    fn linear_obstacle_closed_form_value() {
        // sup over stopping of the upper expectation of B_t at level 0.5 on
        // [0,1] is attained by the terminal rule: value L*T = 0.5
        let ens = base(50, 50_000, 10);
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i));
        let horizon = StoppingRule::fixed(50, 50_000);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.5,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        assert!(
            (sol.v0 - 0.5).abs() < 0.03 * 0.5 + 3.0 * sol.v0_std_error,
            "v0 = {}, se = {}",
            sol.v0,
            sol.v0_std_error
        );

        // re-evaluating the obstacle at the first-contact rule under the
        // same upper expectation reproduces the value
        let at_rule = sol.rule().eval_process(&obstacle, &ens);
        let re = nonlinear_expectation_at(
            &Diffusion::identity(1),
            &at_rule,
            sol.rule(),
            0.5,
            Side::Upper,
            &ens,
            &basis(),
        )
        .unwrap();
        let se = (sol.v0_std_error.powi(2) + re.std_error.powi(2)).sqrt();
        assert!(
            (re.value - sol.v0).abs() <= 3.0 * se + 1e-3,
            "re-evaluation {} vs v0 {} (se {})",
            re.value,
            sol.v0,
            se
        );
    }

    #[test]
    fn suboptimal_rules_are_dominated() {
        let ens = base(40, 20_000, 11);
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i));
        let horizon = StoppingRule::fixed(40, 20_000);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.5,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        for rule in [
            StoppingRule::fixed(0, 20_000),
            StoppingRule::fixed(20, 20_000),
            StoppingRule::localizing(&ens, 40, 0.5),
        ] {
            let at_rule = rule.eval_process(&obstacle, &ens);
            let val = nonlinear_expectation_at(
                &Diffusion::identity(1),
                &at_rule,
                &rule,
                0.5,
                Side::Upper,
                &ens,
                &basis(),
            )
            .unwrap();
            let se = (sol.v0_std_error.powi(2) + val.std_error.powi(2)).sqrt();
            assert!(
                val.value <= sol.v0 + 3.0 * se + 1e-3,
                "rule value {} exceeds envelope {}",
                val.value,
                sol.v0
            );
        }
    }

    #[test]
    fn supermartingale_obstacle_touches_at_once() {
        let ens = base(40, 20_000, 12);
        let obstacle = ScalarProcess::new(|i, w| {
            let x = w.scalar(i);
            -x * x
        });
        let horizon = StoppingRule::fixed(40, 20_000);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.0,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        assert!(
            sol.v0.abs() <= 0.02,
            "supermartingale envelope should start at the obstacle, v0 = {}",
            sol.v0
        );
    }

    #[test]
    fn upper_envelope_constant_barrier() {
        let ens = base(20, 1000, 13);
        let barrier = ScalarProcess::constant(2.5);
        // driverless case: constant regressions are exact, so the envelope
        // rides the barrier with no reflection at all
        let sol =
            upper_snell_envelope(&Diffusion::identity(1), &barrier, 0.0, &ens, &basis()).unwrap();
        for p in 0..1000 {
            for i in 0..=20 {
                assert_abs_diff_eq!(sol.y_at(p, i), 2.5, epsilon = 1e-9);
            }
            for i in 0..20 {
                assert!(sol.k_at(p, i).abs() <= 1e-9);
            }
        }
        // with a positive level the value is still pinned to the barrier
        // (the one-step expectation can only exceed it); the compensator
        // absorbs the gradient-noise term h*L*|z| which is small but not 0
        let sol =
            upper_snell_envelope(&Diffusion::identity(1), &barrier, 0.3, &ens, &basis()).unwrap();
        let mut total = 0.0;
        for p in 0..1000 {
            for i in 0..=20 {
                assert_abs_diff_eq!(sol.y_at(p, i), 2.5, epsilon = 1e-9);
            }
            for i in 0..20 {
                let dk = sol.k_at(p, i);
                assert!((0.0..=1.0).contains(&dk), "dk = {dk}");
                total += dk;
            }
        }
        // per-path noise can spike at fit leverage points, but on average
        // the reflection term is tiny
        assert!(total / (1000.0 * 20.0) <= 0.02);
    }

    #[test]
    fn upper_envelope_monotone_barriers() {
        let ens = base(20, 1000, 14);
        // increasing barrier: immediate stopping attains the infimum, the
        // envelope rides the barrier and the compensator absorbs its slope
        let up = ScalarProcess::new(|i, w| w.grid().time(i));
        let sol = upper_snell_envelope(&Diffusion::identity(1), &up, 0.0, &ens, &basis()).unwrap();
        let h = 1.0 / 20.0;
        for p in 0..10 {
            for i in 0..=20 {
                assert_abs_diff_eq!(sol.y_at(p, i), sol.obstacle_at(p, i), epsilon = 1e-10);
            }
            for i in 0..20 {
                assert_abs_diff_eq!(sol.k_at(p, i), h, epsilon = 1e-10);
            }
        }
        assert_abs_diff_eq!(sol.v0, 0.0, epsilon = 1e-10);

        // decreasing barrier: the infimum over future values is the
        // terminal one everywhere
        let down = ScalarProcess::new(|i, w| -w.grid().time(i));
        let sol =
            upper_snell_envelope(&Diffusion::identity(1), &down, 0.0, &ens, &basis()).unwrap();
        for p in 0..10 {
            for i in 0..=20 {
                assert_abs_diff_eq!(sol.y_at(p, i), -1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn per_path_horizon_freezes_the_recursion() {
        let ens = base(20, 2000, 15);
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i));
        let horizon = StoppingRule::localizing(&ens, 10, 0.7);
        let sol = snell_envelope(
            &Diffusion::identity(1),
            &obstacle,
            0.5,
            &horizon,
            &ens,
            &basis(),
        )
        .unwrap();
        for p in 0..2000 {
            let hp = horizon.index(p);
            assert!(hp <= 10);
            assert!(sol.rule().index(p) <= hp);
            // past the horizon the envelope stays at the stopped obstacle
            let frozen = sol.obstacle_at(p, hp);
            for i in hp..=20 {
                assert_eq!(sol.y_at(p, i), frozen);
                assert_eq!(sol.obstacle_at(p, i), frozen);
            }
        }
    }

    #[test]
    fn tree_depth_one_matches_hand_computation() {
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i));
        let h = 0.25;
        let tree = brute_force_snell_tree(&obstacle, 0.5, 1, h).unwrap();
        // continuation = 0 + L*sqrt(h)*|2 sqrt(h)|/2 = L*h
        assert_abs_diff_eq!(tree.value, 0.5 * h, epsilon = 1e-15);
        assert_eq!(tree.enumerated, Some(tree.value));
    }

    #[test]
    fn tree_decreasing_obstacle_stops_at_root() {
        let obstacle = ScalarProcess::new(|i, w| -w.grid().time(i));
        for depth in [1usize, 3, 6] {
            let tree = brute_force_snell_tree(&obstacle, 0.7, depth, 1.0).unwrap();
            assert_abs_diff_eq!(tree.value, 0.0, epsilon = 1e-15);
            assert!(tree.stop_indices.iter().all(|&s| s == 0));
        }
    }

    #[test]
    fn tree_backward_equals_enumeration() {
        let cases: [ScalarProcess; 3] = [
            ScalarProcess::new(|i, w| w.scalar(i)),
            ScalarProcess::new(|i, w| w.scalar(i).abs()),
            ScalarProcess::new(|i, w| -(w.grid().time(i) - 0.45).powi(2)),
        ];
        for obstacle in &cases {
            for level in [0.0, 0.5] {
                let tree = brute_force_snell_tree(obstacle, level, 4, 1.0).unwrap();
                let enumerated = tree.enumerated.unwrap();
                assert!(
                    (tree.value - enumerated).abs() <= 1e-12,
                    "backward {} vs enumeration {}",
                    tree.value,
                    enumerated
                );
            }
        }
    }

    #[test]
    fn tree_exact_ensemble_mode_reproduces_oracle() {
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i).abs());
        for depth in [4usize, 8] {
            for level in [0.0, 0.5] {
                let tree = brute_force_snell_tree(&obstacle, level, depth, 1.0).unwrap();
                let ens = tree_ensemble(1.0, depth).unwrap();
                let sol = snell_envelope_tree_exact(&obstacle, level, &ens).unwrap();
                assert!(
                    (sol.v0 - tree.value).abs() <= 1e-10,
                    "depth {depth} level {level}: tree {} vs ensemble {}",
                    tree.value,
                    sol.v0
                );
                // every path carries the root value at index 0
                for p in 0..ens.n_paths() {
                    assert!(
                        (sol.y_at(p, 0) - tree.value).abs() <= 1e-10,
                        "root value mismatch on path {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn tree_depth_limits_are_enforced() {
        let obstacle = ScalarProcess::new(|i, w| w.scalar(i));
        assert!(matches!(
            brute_force_snell_tree(&obstacle, 0.0, 0, 1.0),
            Err(Error::TreeDepth { .. })
        ));
        assert!(matches!(
            brute_force_snell_tree(&obstacle, 0.0, 13, 1.0),
            Err(Error::TreeDepth { .. })
        ));
        let deep = brute_force_snell_tree(&obstacle, 0.0, 6, 1.0).unwrap();
        assert!(deep.enumerated.is_none());
    }

    #[test]
    fn stopping_rule_constructors() {
        let ens = base(10, 100, 16);
        let fixed = StoppingRule::fixed(4, 100);
        assert_eq!(fixed.len(), 100);
        assert_eq!(fixed.max_index(), 4);
        assert!(StoppingRule::from_indices(vec![0, 11], 10).is_err());
        let pred = StoppingRule::from_predicate(&ens, |i, w| w.scalar(i) >= 0.4);
        for p in 0..100 {
            let tau = pred.index(p);
            let view = ens.path_view(p);
            for i in 0..tau {
                assert!(view.scalar(i) < 0.4);
            }
            if tau < 10 {
                assert!(view.scalar(tau) >= 0.4);
            }
        }
        let loc = StoppingRule::localizing(&ens, 3, 0.2);
        for p in 0..100 {
            assert!(loc.index(p) <= 3);
        }
        assert!((fixed.mean_time(ens.grid()) - 0.4).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_tree_backward_equals_enumeration(
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
            c in -1.0f64..1.0,
            level in 0.0f64..1.0,
            depth in 1usize..=4,
        ) {
            let obstacle = ScalarProcess::new(move |i, w| {
                let t = w.grid().time(i);
                let x = w.scalar(i);
                a * t + b * x + c * x.abs()
            });
            let tree = brute_force_snell_tree(&obstacle, level, depth, 1.0).unwrap();
            let enumerated = tree.enumerated.unwrap();
            prop_assert!((tree.value - enumerated).abs() <= 1e-12);
        }
    }
}
