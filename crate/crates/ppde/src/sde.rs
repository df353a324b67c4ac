//! Euler scheme simulation of the controlled dynamics
//!
//! ```text
//! X_0 = 0,   X_{i+1} = X_i + sigma(t_i, X) (dB_i + lambda(t_i, X) h),
//! ```
//!
//! with `dB_i ~ N(0, h I_d)` and an optional bounded adapted drift control
//! `lambda`. The base measure (`lambda = 0`) can be reweighted to the
//! drifted one with the exponential density
//!
//! ```text
//! W = exp( sum_i lambda_i . dB_i - h/2 sum_i |lambda_i|^2 ),
//! ```
//!
//! computed in log space for stability. Conditional ensembles freeze a
//! prefix and simulate fresh suffixes under the same coefficient, which is
//! exactly the shifted-coefficient dynamics of the suffix.
//!
//! # Randomness
//!
//! Each path owns a dedicated ChaCha stream keyed by (seed, path index).
//! Normals are produced by a fixed-consumption Box–Muller transform (exactly
//! two 64-bit draws per normal), so the k-th normal of a path sits at a
//! known word offset and the increment for (seed, path, step) is a pure
//! function of those three values — results cannot depend on the thread
//! count, and increments can be regenerated without storing the stream.

use crate::error::{Error, Result};
use crate::paths::{
    Diffusion, DriftControl, IncrementSource, MeasureTag, PathEnsemble, PathView, TimeGrid,
};
use crate::util::par_block_fold;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Seed wrapper handing out per-path Gaussian streams.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The dedicated Gaussian stream of one path.
    pub fn path_sampler(&self, path: u64) -> GaussianStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        GaussianStream { rng }
    }
}

/// Sequential standard-normal sampler with O(1) seek, backed by one ChaCha
/// stream. Every normal consumes exactly two 64-bit words, so normal `k`
/// lives at word position `4k`.
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    /// Position the stream so the next draw returns normal number `k`.
    pub fn seek(&mut self, k: u64) {
        self.rng.set_word_pos(k as u128 * 4);
    }

    /// Next standard normal (fixed-consumption Box–Muller).
    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // u in (0, 1], v in [0, 1): 53-bit mantissas
        let u = ((a >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let v = (b >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }
}

/// Regenerate the stored increment buffer of an ensemble from its seed:
/// path-major, grid steps before `start` zeroed, step `j >= start` fed by
/// normals `(j - start) * d ..` of the path's stream, scaled by `sqrt(h)`.
pub(crate) fn regenerate_increments(
    seed: u64,
    n_paths: usize,
    n: usize,
    dim: usize,
    h: f64,
    start: usize,
) -> Vec<f64> {
    let stream = RngStream::new(seed);
    let sqrt_h = h.sqrt();
    let stride = n * dim;
    let mut inc = vec![0.0f64; n_paths * stride];
    inc.par_chunks_mut(stride).enumerate().for_each(|(p, row)| {
        let mut sampler = stream.path_sampler(p as u64);
        for v in row.iter_mut().skip(start * dim) {
            *v = sampler.next_normal() * sqrt_h;
        }
    });
    inc
}

struct SimSpec<'a> {
    sigma: &'a Diffusion,
    control: Option<&'a DriftControl>,
    grid: TimeGrid,
    n_paths: usize,
    stream: RngStream,
    /// Frozen prefix values (length `(start + 1) * d`), shared by all paths.
    prefix: &'a [f64],
    start: usize,
}

fn simulate(spec: SimSpec<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.sigma.dim();
    let n = spec.grid.steps();
    let h = spec.grid.spacing();
    let sqrt_h = h.sqrt();
    let vstride = (n + 1) * d;
    let istride = n * d;
    let mut values = vec![0.0f64; spec.n_paths * vstride];
    let mut increments = vec![0.0f64; spec.n_paths * istride];

    let results: Vec<Result<()>> = values
        .par_chunks_mut(vstride)
        .zip(increments.par_chunks_mut(istride))
        .enumerate()
        .map(|(p, (row, inc))| {
            row[..spec.prefix.len()].copy_from_slice(spec.prefix);
            let mut sampler = spec.stream.path_sampler(p as u64);
            let mut sig = vec![0.0f64; d * d];
            let mut lam = vec![0.0f64; d];
            let mut eff = vec![0.0f64; d];
            let mut delta = vec![0.0f64; d];
            for i in spec.start..n {
                for c in 0..d {
                    let db = sampler.next_normal() * sqrt_h;
                    inc[i * d + c] = db;
                    eff[c] = db;
                }
                let (done, rest) = row.split_at_mut((i + 1) * d);
                let view = PathView::from_raw(spec.grid, d, done);
                spec.sigma.eval_into(i, &view, &mut sig);
                if let Some(ctrl) = spec.control {
                    ctrl.eval_checked(i, &view, p, &mut lam)?;
                    for c in 0..d {
                        eff[c] += lam[c] * h;
                    }
                }
                Diffusion::apply(&sig, &eff, &mut delta);
                let here = &done[i * d..];
                for c in 0..d {
                    let next = here[c] + delta[c];
                    if !next.is_finite() {
                        return Err(Error::NonFinite {
                            context: "simulated path",
                            path: p,
                            step: i,
                        });
                    }
                    rest[c] = next;
                }
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok((values, increments))
}

/// Simulate `n_paths` base-measure paths (`lambda = 0`) of the dynamics
/// driven by `sigma`, starting from the origin.
pub fn simulate_base(
    sigma: &Diffusion,
    grid: TimeGrid,
    n_paths: usize,
    stream: RngStream,
) -> Result<PathEnsemble> {
    let d = sigma.dim();
    let prefix = vec![0.0f64; d];
    let (values, increments) = simulate(SimSpec {
        sigma,
        control: None,
        grid,
        n_paths,
        stream,
        prefix: &prefix,
        start: 0,
    })?;
    PathEnsemble::from_parts(
        grid,
        d,
        n_paths,
        values,
        increments,
        vec![1.0; n_paths],
        stream.seed(),
        MeasureTag::Base,
        IncrementSource::Stream,
    )
}

/// Simulate under the drift-perturbed dynamics. The stored increments are
/// the raw Gaussian draws `dB_i` (not the drift-adjusted state increments).
pub fn simulate_drifted(
    sigma: &Diffusion,
    control: &DriftControl,
    grid: TimeGrid,
    n_paths: usize,
    stream: RngStream,
    control_label: &str,
) -> Result<PathEnsemble> {
    let d = sigma.dim();
    if control.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: control.dim(),
        });
    }
    let prefix = vec![0.0f64; d];
    let (values, increments) = simulate(SimSpec {
        sigma,
        control: Some(control),
        grid,
        n_paths,
        stream,
        prefix: &prefix,
        start: 0,
    })?;
    PathEnsemble::from_parts(
        grid,
        d,
        n_paths,
        values,
        increments,
        vec![1.0; n_paths],
        stream.seed(),
        MeasureTag::Drifted {
            control: control_label.to_string(),
        },
        IncrementSource::Stream,
    )
}

/// Per-path Girsanov reweighting factors turning the base ensemble into a
/// representation of the drift-perturbed measure:
/// `W_p = exp( sum_i lambda . dB_i - h/2 sum_i |lambda|^2 )`.
///
/// Requires a base ensemble with stream-generated increments (the raw
/// Gaussian draws are exactly the stored increments). The log weight is
/// accumulated per path and exponentiated once.
pub fn girsanov_weights(control: &DriftControl, ens: &PathEnsemble) -> Result<Vec<f64>> {
    if *ens.measure() != MeasureTag::Base {
        return Err(Error::MeasureMismatch {
            expected: "base".into(),
            got: ens.measure().label(),
        });
    }
    if ens.increment_source() != IncrementSource::Stream {
        return Err(Error::MeasureMismatch {
            expected: "stream increments".into(),
            got: "path differences".into(),
        });
    }
    let d = ens.dim();
    if control.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: control.dim(),
        });
    }
    let n = ens.grid().steps();
    let h = ens.grid().spacing();
    let weights: Vec<Result<f64>> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut lam = vec![0.0f64; d];
            let mut lw = 0.0f64;
            for i in 0..n {
                let view = ens.prefix_view(p, i);
                control.eval_checked(i, &view, p, &mut lam)?;
                let db = ens.increment(p, i);
                let mut dot = 0.0;
                let mut sq = 0.0;
                for c in 0..d {
                    dot += lam[c] * db[c];
                    sq += lam[c] * lam[c];
                }
                lw += dot - 0.5 * sq * h;
            }
            Ok(lw.exp())
        })
        .collect();
    weights.into_iter().collect()
}

/// Conditional ensemble at the space-time point `(i, omega)`: every path
/// agrees with `omega` up to index `i` and continues with a fresh suffix
/// simulated under `sigma`. Evaluating the original coefficients at
/// absolute indices on these paths realizes the shifted coefficients of the
/// suffix, so solvers can run on conditional ensembles unchanged.
pub fn conditional_ensemble(
    sigma: &Diffusion,
    point: (usize, &PathView<'_>),
    n_paths: usize,
    stream: RngStream,
) -> Result<PathEnsemble> {
    let (i, omega) = point;
    let d = sigma.dim();
    if omega.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: omega.dim(),
        });
    }
    let grid = omega.grid();
    let n = grid.steps();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, max: n - 1 });
    }
    if omega.points() < i + 1 {
        return Err(Error::IndexOutOfRange {
            index: i,
            max: omega.points().saturating_sub(1),
        });
    }
    let prefix = omega.raw()[..(i + 1) * d].to_vec();
    let (values, increments) = simulate(SimSpec {
        sigma,
        control: None,
        grid,
        n_paths,
        stream,
        prefix: &prefix,
        start: i,
    })?;
    PathEnsemble::from_parts(
        grid,
        d,
        n_paths,
        values,
        increments,
        vec![1.0; n_paths],
        stream.seed(),
        MeasureTag::Conditional { start: i },
        IncrementSource::Stream,
    )
}

/// Weighted column of a scalar process over all paths at one index
/// (parallel, deterministic order).
pub fn eval_column(f: &crate::paths::ScalarProcess, ens: &PathEnsemble, i: usize) -> Vec<f64> {
    (0..ens.n_paths())
        .into_par_iter()
        .map(|p| f.eval(i, &ens.path_view(p)))
        .collect()
}

/// Deterministic weighted-mean helper over paths of an ensemble.
pub fn ensemble_mean(values: &[f64], ens: &PathEnsemble) -> (f64, f64) {
    crate::util::weighted_mean_se(values, ens.weights())
}

/// Unnormalized importance-sampling mean `sum(w x) / N` with standard error
/// of the per-path products; the natural estimator when weights have unit
/// expectation (Girsanov factors).
pub fn unnormalized_weighted_mean(values: &[f64], weights: &[f64]) -> (f64, f64) {
    assert_eq!(values.len(), weights.len());
    let n = values.len();
    let sum = par_block_fold(
        n,
        |r| r.map(|p| weights[p] * values[p]).sum::<f64>(),
        0.0,
        |a, b| a + b,
    );
    let mean = sum / n as f64;
    let ss = par_block_fold(
        n,
        |r| r.map(|p| (weights[p] * values[p] - mean).powi(2)).sum::<f64>(),
        0.0,
        |a, b| a + b,
    );
    let se = if n > 1 {
        (ss / ((n - 1) as f64 * n as f64)).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::ScalarProcess;
    use crate::util::mean_se;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn identity_sigma_paths_equal_brownian_increments() {
        let ens = simulate_base(&Diffusion::identity(1), grid(8), 16, RngStream::new(1)).unwrap();
        for p in 0..16 {
            let v = ens.path_view(p);
            for i in 0..8 {
                // each point is the previous one advanced by exactly the
                // driving increment, bit for bit
                let stepped = v.scalar(i) + ens.increment(p, i)[0];
                assert_eq!(stepped.to_bits(), v.scalar(i + 1).to_bits());
            }
        }
    }

    #[test]
    fn zero_sigma_freezes_paths() {
        let sigma = Diffusion::scaled_identity(1, 0.0);
        let ens = simulate_base(&sigma, grid(8), 16, RngStream::new(1)).unwrap();
        assert!(ens.values_raw().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_step_variance_matches_h() {
        let n_paths = 100_000;
        let ens = simulate_base(&Diffusion::identity(1), grid(4), n_paths, RngStream::new(5))
            .unwrap();
        let x1: Vec<f64> = (0..n_paths).map(|p| ens.path_view(p).scalar(1)).collect();
        let (m, _) = mean_se(&x1);
        let var: f64 = x1.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
        let h = 0.25;
        let se_var = h * (2.0 / (n_paths - 1) as f64).sqrt();
        assert!((var - h).abs() <= 3.0 * se_var, "var {var} vs {h}");
        assert!(m.abs() <= 3.0 * (h / n_paths as f64).sqrt());
    }

    #[test]
    fn zero_control_is_bitwise_base() {
        let sigma = Diffusion::identity(1);
        let base = simulate_base(&sigma, grid(8), 32, RngStream::new(3)).unwrap();
        let zero = DriftControl::constant(vec![0.0], 0.5).unwrap();
        let drifted =
            simulate_drifted(&sigma, &zero, grid(8), 32, RngStream::new(3), "zero").unwrap();
        assert_eq!(base.values_raw(), drifted.values_raw());
    }

    #[test]
    fn constant_drift_shifts_terminal_mean() {
        let sigma = Diffusion::identity(1);
        let lam = DriftControl::constant(vec![0.3], 0.5).unwrap();
        let n_paths = 50_000;
        let ens =
            simulate_drifted(&sigma, &lam, grid(16), n_paths, RngStream::new(11), "c0.3").unwrap();
        let xt: Vec<f64> = (0..n_paths)
            .map(|p| ens.path_view(p).scalar(16))
            .collect();
        let (m, se) = mean_se(&xt);
        assert!((m - 0.3).abs() <= 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn degenerate_sigma_ignores_control() {
        let sigma = Diffusion::scaled_identity(1, 0.0);
        let lam = DriftControl::constant(vec![0.5], 0.5).unwrap();
        let ens = simulate_drifted(&sigma, &lam, grid(8), 8, RngStream::new(3), "c").unwrap();
        assert!(ens.values_raw().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn determinism_across_thread_counts() {
        let sigma = Diffusion::new(1, |i, w: &PathView<'_>, out: &mut [f64]| {
            out[0] = 1.0 + 0.2 * (w.sup_norm(i)).tanh();
        });
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| simulate_base(&sigma, grid(16), 1000, RngStream::new(77)).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.values_raw(), b.values_raw());
    }

    #[test]
    fn same_seed_same_bits() {
        let sigma = Diffusion::identity(2);
        let a = simulate_base(&sigma, grid(8), 64, RngStream::new(123)).unwrap();
        let b = simulate_base(&sigma, grid(8), 64, RngStream::new(123)).unwrap();
        assert_eq!(a.values_raw(), b.values_raw());
        let c = simulate_base(&sigma, grid(8), 64, RngStream::new(124)).unwrap();
        assert_ne!(a.values_raw(), c.values_raw());
    }

    #[test]
    fn girsanov_zero_control_gives_unit_weights() {
        let ens = simulate_base(&Diffusion::identity(1), grid(8), 32, RngStream::new(9)).unwrap();
        let zero = DriftControl::constant(vec![0.0], 0.5).unwrap();
        let w = girsanov_weights(&zero, &ens).unwrap();
        assert!(w.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn girsanov_weights_have_unit_mean() {
        let n_paths = 50_000;
        let ens = simulate_base(&Diffusion::identity(1), grid(16), n_paths, RngStream::new(21))
            .unwrap();
        let lam = DriftControl::constant(vec![0.4], 0.5).unwrap();
        let w = girsanov_weights(&lam, &ens).unwrap();
        let (m, se) = mean_se(&w);
        assert!((m - 1.0).abs() <= 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn weighted_base_matches_drifted_estimate() {
        // Same seed on both sides: the difference estimator is paired.
        let n_paths = 50_000;
        let g = grid(16);
        let sigma = Diffusion::identity(1);
        let lam = DriftControl::constant(vec![0.3], 0.5).unwrap();
        let base = simulate_base(&sigma, g, n_paths, RngStream::new(33)).unwrap();
        let drift = simulate_drifted(&sigma, &lam, g, n_paths, RngStream::new(33), "c").unwrap();
        let w = girsanov_weights(&lam, &base).unwrap();
        let diffs: Vec<f64> = (0..n_paths)
            .map(|p| w[p] * base.path_view(p).scalar(16) - drift.path_view(p).scalar(16))
            .collect();
        let (m, se) = mean_se(&diffs);
        assert!(m.abs() <= 3.0 * se, "paired diff {m} se {se}");
        // and both estimate 0.3
        let xw: Vec<f64> = (0..n_paths).map(|p| base.path_view(p).scalar(16)).collect();
        let (mw, sew) = unnormalized_weighted_mean(&xw, &w);
        assert!((mw - 0.3).abs() <= 3.0 * sew);
    }

    #[test]
    fn compensated_drifted_increments_have_zero_conditional_mean() {
        // On a drifted ensemble, dX_i - sigma lambda h = sigma dB_i: the
        // regression of the compensated increments on time-i features is
        // statistically zero.
        let n_paths = 20_000;
        let g = grid(8);
        let sigma = Diffusion::identity(1);
        let lam = DriftControl::constant(vec![0.4], 0.5).unwrap();
        let ens = simulate_drifted(&sigma, &lam, g, n_paths, RngStream::new(8), "c").unwrap();
        let h = g.spacing();
        let i = 4;
        let comp: Vec<f64> = (0..n_paths)
            .map(|p| {
                let v = ens.path_view(p);
                (v.scalar(i + 1) - v.scalar(i)) - 0.4 * h
            })
            .collect();
        let basis = crate::bsde::RegressionBasis::new(2);
        let fit = crate::bsde::regress(&ens, i, &comp, &basis).unwrap();
        // the fitted conditional mean should vanish: its RMS is far below
        // the sqrt(h) spread of the raw increments
        let rms = (fit.fitted.iter().map(|x| x * x).sum::<f64>() / n_paths as f64).sqrt();
        assert!(rms <= 0.05 * h.sqrt(), "fitted rms {rms}");
    }

    #[test]
    fn conditional_at_zero_matches_base_bitwise() {
        let sigma = Diffusion::identity(1);
        let g = grid(8);
        let base = simulate_base(&sigma, g, 64, RngStream::new(17)).unwrap();
        let omega = crate::paths::DiscretePath::zero(g, 1);
        let cond = conditional_ensemble(&sigma, (0, &omega.view()), 64, RngStream::new(17))
            .unwrap();
        assert_eq!(base.values_raw(), cond.values_raw());
    }

    #[test]
    fn conditional_prefix_and_terminal_mean() {
        let sigma = Diffusion::identity(1);
        let g = grid(10);
        // a path reaching a = 0.7 at i = 5
        let mut vals = vec![0.0; 11];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = 0.7 * (j as f64 / 5.0).min(1.4);
        }
        let omega = crate::paths::DiscretePath::scalar(g, vals).unwrap();
        let n_paths = 40_000;
        let cond =
            conditional_ensemble(&sigma, (5, &omega.view()), n_paths, RngStream::new(4)).unwrap();
        for p in 0..8 {
            for j in 0..=5 {
                assert_eq!(cond.path_view(p).scalar(j), omega.view().scalar(j));
            }
        }
        let f = ScalarProcess::new(|i, w: &PathView<'_>| w.scalar(i));
        let xt = eval_column(&f, &cond, 10);
        let (m, se) = mean_se(&xt);
        assert!((m - 0.7).abs() <= 3.0 * se, "terminal mean {m} se {se}");
    }
}
