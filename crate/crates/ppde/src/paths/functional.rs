//! Adapted functionals on the path space.
//!
//! Everything the engine consumes — diffusion coefficients, BSDE drivers,
//! terminal payoffs, obstacles, candidate solutions, drift controls — is a
//! *non-anticipative* map from a space-time point `(i, omega)` to a value:
//! the result may depend only on the path up to index `i`. Adaptedness is a
//! contract on the supplied closure; [`probe_adapted`] spot-checks it by
//! evaluating on path pairs that agree up to `i` and differ afterwards.
//!
//! Conditioning works by concatenation: [`shift_eval`] evaluates a
//! functional on `w ⊗_i w'`, which by definition *is* the shifted functional
//! of the suffix. The solvers exploit this by simulating full-length
//! conditional paths and evaluating the original functionals at absolute
//! indices, so no separate "shifted" closure type is needed.

use super::{concat, DiscretePath, PathView, TimeGrid};
use crate::error::{Error, Result};
use crate::util::norm2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

type ScalarFn = Arc<dyn Fn(usize, &PathView<'_>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync>;
type DriverFn = Arc<dyn Fn(usize, &PathView<'_>, f64, &[f64]) -> f64 + Send + Sync>;

/// Adapted scalar process: terminal payoffs (evaluated at the last index),
/// obstacles, and candidate solutions.
#[derive(Clone)]
pub struct ScalarProcess {
    eval: ScalarFn,
}

impl ScalarProcess {
    pub fn new(f: impl Fn(usize, &PathView<'_>) -> f64 + Send + Sync + 'static) -> Self {
        ScalarProcess { eval: Arc::new(f) }
    }

    pub fn constant(c: f64) -> Self {
        ScalarProcess::new(move |_, _| c)
    }

    pub fn eval(&self, i: usize, path: &PathView<'_>) -> f64 {
        (self.eval)(i, path)
    }

    /// Pointwise negation. Negation of an IEEE double is exact, so solving a
    /// problem on the negated process and negating the result is bit-exact
    /// duality.
    pub fn negated(&self) -> ScalarProcess {
        let inner = self.eval.clone();
        ScalarProcess::new(move |i, w| -(inner)(i, w))
    }

    /// Pointwise sum of two processes.
    pub fn sum(&self, other: &ScalarProcess) -> ScalarProcess {
        let (a, b) = (self.eval.clone(), other.eval.clone());
        ScalarProcess::new(move |i, w| a(i, w) + b(i, w))
    }

    /// Pointwise difference `self - other`.
    pub fn minus(&self, other: &ScalarProcess) -> ScalarProcess {
        let (a, b) = (self.eval.clone(), other.eval.clone());
        ScalarProcess::new(move |i, w| a(i, w) - b(i, w))
    }

    /// Scaled process `c * self`.
    pub fn scaled(&self, c: f64) -> ScalarProcess {
        let inner = self.eval.clone();
        ScalarProcess::new(move |i, w| c * inner(i, w))
    }

    /// Shifted process `self + c`.
    pub fn plus_constant(&self, c: f64) -> ScalarProcess {
        let inner = self.eval.clone();
        ScalarProcess::new(move |i, w| inner(i, w) + c)
    }
}

/// Adapted vector-valued process (e.g. a candidate gradient).
#[derive(Clone)]
pub struct VectorProcess {
    dim: usize,
    eval: VectorFn,
}

impl VectorProcess {
    pub fn new(
        dim: usize,
        f: impl Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        VectorProcess { dim, eval: Arc::new(f) }
    }

    pub fn constant(values: Vec<f64>) -> Self {
        let dim = values.len();
        VectorProcess::new(dim, move |_, _, out| out.copy_from_slice(&values))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_into(&self, i: usize, path: &PathView<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        (self.eval)(i, path, out)
    }

    pub fn eval_vec(&self, i: usize, path: &PathView<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(i, path, &mut out);
        out
    }
}

/// Adapted diffusion coefficient: writes the `d x d` matrix (row-major)
/// for the point `(i, omega)` into a caller-provided buffer.
#[derive(Clone)]
pub struct Diffusion {
    dim: usize,
    eval: VectorFn,
}

impl Diffusion {
    pub fn new(
        dim: usize,
        f: impl Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!(dim > 0);
        Diffusion { dim, eval: Arc::new(f) }
    }

    /// Identity diffusion: the canonical process is driven directly by the
    /// Brownian increments.
    pub fn identity(dim: usize) -> Self {
        Diffusion::new(dim, move |_, _, out| {
            out.fill(0.0);
            for c in 0..dim {
                out[c * dim + c] = 1.0;
            }
        })
    }

    /// Constant diagonal diffusion `c * I`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Diffusion::new(dim, move |_, _, out| {
            out.fill(0.0);
            for k in 0..dim {
                out[k * dim + k] = c;
            }
        })
    }

    /// Constant matrix diffusion (row-major `d x d`).
    pub fn constant(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        Ok(Diffusion::new(dim, move |_, _, out| {
            out.copy_from_slice(&matrix)
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluate into `out` (length `d * d`, row-major).
    pub fn eval_into(&self, i: usize, path: &PathView<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim * self.dim);
        (self.eval)(i, path, out)
    }

    /// `out = sigma * v` for a row-major buffer previously filled by
    /// [`Diffusion::eval_into`].
    pub fn apply(buf: &[f64], v: &[f64], out: &mut [f64]) {
        let d = v.len();
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += buf[r * d + c] * v[c];
            }
            out[r] = s;
        }
    }

    /// `out = sigma^T * v`.
    pub fn apply_transpose(buf: &[f64], v: &[f64], out: &mut [f64]) {
        let d = v.len();
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += buf[c * d + r] * v[c];
            }
            out[r] = s;
        }
    }
}

/// BSDE driver `F(t_i, omega, y, z)`. The `z` slot receives `sigma^T Z`,
/// the gradient-like argument of the semilinear generator.
#[derive(Clone)]
pub struct Driver {
    eval: DriverFn,
}

impl Driver {
    pub fn new(
        f: impl Fn(usize, &PathView<'_>, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Driver { eval: Arc::new(f) }
    }

    pub fn zero() -> Self {
        Driver::new(|_, _, _, _| 0.0)
    }

    pub fn constant(c: f64) -> Self {
        Driver::new(move |_, _, _, _| c)
    }

    pub fn eval(&self, i: usize, path: &PathView<'_>, y: f64, z: &[f64]) -> f64 {
        (self.eval)(i, path, y, z)
    }
}

/// Bounded adapted drift control `lambda` with `|lambda| <= bound`.
/// The bound is enforced on every evaluation during simulation.
#[derive(Clone)]
pub struct DriftControl {
    dim: usize,
    bound: f64,
    eval: VectorFn,
}

impl DriftControl {
    pub fn new(
        dim: usize,
        bound: f64,
        f: impl Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(bound >= 0.0) {
            return Err(Error::Precondition(format!(
                "control bound must be nonnegative, got {bound}"
            )));
        }
        Ok(DriftControl { dim, bound, eval: Arc::new(f) })
    }

    pub fn constant(values: Vec<f64>, bound: f64) -> Result<Self> {
        let dim = values.len();
        let norm = norm2(&values);
        if norm > bound * (1.0 + 1e-12) {
            return Err(Error::ControlBound {
                path: 0,
                step: 0,
                norm,
                bound,
            });
        }
        DriftControl::new(dim, bound, move |_, _, out| out.copy_from_slice(&values))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Evaluate without re-verifying the bound (for consumers of controls
    /// that were already validated during simulation).
    pub fn eval_unchecked(&self, i: usize, path: &PathView<'_>, out: &mut [f64]) {
        (self.eval)(i, path, out);
    }

    /// Evaluate and verify the bound; reports the offending location.
    pub fn eval_checked(
        &self,
        i: usize,
        path: &PathView<'_>,
        path_id: usize,
        out: &mut [f64],
    ) -> Result<()> {
        (self.eval)(i, path, out);
        let norm = norm2(out);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "drift control",
                path: path_id,
                step: i,
            });
        }
        if norm > self.bound * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::ControlBound {
                path: path_id,
                step: i,
                norm,
                bound: self.bound,
            });
        }
        Ok(())
    }
}

/// Evaluate `f` on the concatenated path `w ⊗_i w'` at suffix offset `s`
/// (absolute index `i + s`). This is the shifted functional of the suffix;
/// by construction it agrees bit-exactly with explicit concatenation.
pub fn shift_eval_at(
    f: &ScalarProcess,
    i: usize,
    prefix: &PathView<'_>,
    suffix: &PathView<'_>,
    s: usize,
) -> Result<f64> {
    let cat = concat(prefix, i, suffix)?;
    let n = cat.grid().steps();
    if i + s > n {
        return Err(Error::IndexOutOfRange { index: i + s, max: n });
    }
    Ok(f.eval(i + s, &cat.view()))
}

/// Evaluate `f` on `w ⊗_i w'` at the terminal index (the common case for
/// terminal payoffs).
pub fn shift_eval(
    f: &ScalarProcess,
    i: usize,
    prefix: &PathView<'_>,
    suffix: &PathView<'_>,
) -> Result<f64> {
    let s = suffix.points() - 1;
    shift_eval_at(f, i, prefix, suffix, s)
}

/// Spot-check adaptedness: draw random path pairs that agree up to a random
/// index `i` and differ afterwards, and require equal evaluations at all
/// indices `<= i`. The functional receives the *full* paths (as it does when
/// evaluated on stored ensemble paths), so any dependence on the future
/// shows up as a disagreement. Returns the first violation found.
pub fn probe_adapted(
    f: &ScalarProcess,
    grid: TimeGrid,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<()> {
    let n = grid.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let i = rng.gen_range(0..n);
        let mut a = vec![0.0; (n + 1) * dim];
        for v in a.iter_mut().skip(dim) {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut b = a.clone();
        for v in b.iter_mut().skip((i + 1) * dim) {
            *v = rng.gen_range(-2.0..2.0);
        }
        let pa = DiscretePath::new(grid, dim, a)?;
        let pb = DiscretePath::new(grid, dim, b)?;
        for j in 0..=i {
            let va = f.eval(j, &pa.view());
            let vb = f.eval(j, &pb.view());
            if va.to_bits() != vb.to_bits() {
                return Err(Error::NotAdapted { index: j });
            }
        }
    }
    Ok(())
}
