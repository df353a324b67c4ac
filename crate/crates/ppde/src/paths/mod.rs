//! Discrete path space.
//!
//! The state space is the set of continuous d-dimensional paths started at
//! the origin, sampled on a uniform grid `t_i = i * T / n`. A space-time
//! point is a pair `(i, omega)` of a grid index and a path; closeness of two
//! points is measured by the pseudo-distance
//!
//! ```text
//! d((i, w), (j, w')) = |t_i - t_j| + max_k |w_{k ∧ i} - w'_{k ∧ j}|
//! ```
//!
//! i.e. time distance plus the sup distance of the paths stopped at their
//! respective indices. Concatenation pastes a fresh suffix onto a prefix:
//!
//! ```text
//! (w ⊗_i w')_j = w_j            for j <= i,
//!                w_i + w'_{j-i} for j > i,
//! ```
//!
//! which is the basic operation behind conditioning: a functional evaluated
//! on concatenated paths is the shifted functional of the suffix.

mod ensemble;
mod functional;

pub use ensemble::{IncrementSource, MeasureTag, PathEnsemble};
pub use functional::{
    probe_adapted, shift_eval, shift_eval_at, Diffusion, DriftControl, Driver, ScalarProcess,
    VectorProcess,
};

use crate::error::{Error, Result};
use crate::util::norm2;
use serde::{Deserialize, Serialize};

/// Uniform time grid on `[0, T]` with `n` steps (`n + 1` grid points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Precondition(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::Precondition("grid must have at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Grid spacing `h = T / n`.
    pub fn spacing(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of grid index `i` (allows `i = n`).
    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        i as f64 * self.spacing()
    }

    /// Grid for suffix paths attached at index `i`: `n - i` steps of the
    /// same spacing.
    pub fn suffix(&self, i: usize) -> Result<TimeGrid> {
        if i >= self.steps {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: self.steps - 1,
            });
        }
        let steps = self.steps - i;
        TimeGrid::new(steps as f64 * self.spacing(), steps)
    }

    fn compatible(&self, other: &TimeGrid) -> bool {
        let h = self.spacing();
        (h - other.spacing()).abs() <= 1e-9 * (1.0 + h)
    }
}

/// Borrowed view of the first `points` grid values of a path.
///
/// All functional evaluation goes through views. During simulation a view
/// exposes only the prefix built so far, so a non-adapted evaluator that
/// peeks past the current index fails loudly instead of reading garbage.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    grid: TimeGrid,
    dim: usize,
    values: &'a [f64],
}

impl<'a> PathView<'a> {
    pub(crate) fn from_raw(grid: TimeGrid, dim: usize, values: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0);
        PathView { grid, dim, values }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid points available in this view.
    pub fn points(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Coordinates of the path at grid index `i`. Panics if `i` is outside
    /// the view (in particular, if an evaluator tries to read the future).
    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// First coordinate at index `i`; convenience for scalar models.
    pub fn scalar(&self, i: usize) -> f64 {
        self.values[i * self.dim]
    }

    /// Running sup norm `max_{j <= i} |w_j|` (Euclidean norm per point).
    pub fn sup_norm(&self, i: usize) -> f64 {
        let mut m = 0.0f64;
        for j in 0..=i {
            m = m.max(norm2(self.point(j)));
        }
        m
    }

    /// Left-endpoint running integral of coordinate `c` up to `t_i`:
    /// `sum_{j < i} w_j[c] * h`.
    pub fn running_integral(&self, i: usize, c: usize) -> f64 {
        let h = self.grid.spacing();
        let mut s = 0.0;
        for j in 0..i {
            s += self.values[j * self.dim + c];
        }
        s * h
    }

    pub fn raw(&self) -> &[f64] {
        self.values
    }

    /// Sub-view of the first `i + 1` points.
    pub fn prefix(&self, i: usize) -> PathView<'a> {
        PathView {
            grid: self.grid,
            dim: self.dim,
            values: &self.values[..(i + 1) * self.dim],
        }
    }

    pub fn to_owned_path(&self) -> DiscretePath {
        DiscretePath {
            grid: self.grid,
            dim: self.dim,
            values: self.values.to_vec(),
        }
    }
}

/// Owned path: `n + 1` points of dimension `d`, starting at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    /// Builds a path from raw values (`(n + 1) * d` reals, origin first).
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let expected = (grid.steps() + 1) * dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        let origin = norm2(&values[..dim]);
        if origin != 0.0 {
            return Err(Error::NonzeroOrigin(origin));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "path values",
                path: 0,
                step: 0,
            });
        }
        Ok(DiscretePath { grid, dim, values })
    }

    /// The constant-zero path.
    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        DiscretePath {
            grid,
            dim,
            values: vec![0.0; (grid.steps() + 1) * dim],
        }
    }

    /// Scalar path from a list of values (d = 1).
    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        DiscretePath::new(grid, 1, values)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn view(&self) -> PathView<'_> {
        PathView::from_raw(self.grid, self.dim, &self.values)
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Concatenation `w ⊗_i w'`: keep `w` up to index `i`, then continue with
/// the increments of the suffix `w'` (which must start at the origin and
/// have exactly `n - i` steps on a grid of the same spacing).
pub fn concat(prefix: &PathView<'_>, i: usize, suffix: &PathView<'_>) -> Result<DiscretePath> {
    let grid = prefix.grid();
    let n = grid.steps();
    let d = prefix.dim();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, max: n - 1 });
    }
    if prefix.points() < i + 1 {
        return Err(Error::IndexOutOfRange {
            index: i,
            max: prefix.points().saturating_sub(1),
        });
    }
    if suffix.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: suffix.dim(),
        });
    }
    if suffix.points() != n - i + 1 {
        return Err(Error::GridMismatch(format!(
            "suffix must have {} points, got {}",
            n - i + 1,
            suffix.points()
        )));
    }
    if !grid.compatible(&suffix.grid()) {
        return Err(Error::GridMismatch(format!(
            "suffix spacing {} incompatible with prefix spacing {}",
            suffix.grid().spacing(),
            grid.spacing()
        )));
    }
    let s0 = norm2(suffix.point(0));
    if s0 != 0.0 {
        return Err(Error::NonzeroOrigin(s0));
    }
    let mut values = Vec::with_capacity((n + 1) * d);
    values.extend_from_slice(&prefix.raw()[..(i + 1) * d]);
    let anchor: Vec<f64> = prefix.point(i).to_vec();
    for j in 1..=(n - i) {
        let sp = suffix.point(j);
        for c in 0..d {
            values.push(anchor[c] + sp[c]);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "concatenated path",
            path: 0,
            step: 0,
        });
    }
    Ok(DiscretePath { grid, dim: d, values })
}

/// Pseudo-distance between space-time points:
/// `|t_i - t_j| + max_k |w_{k ∧ i} - w'_{k ∧ j}|`.
pub fn pseudo_distance(a: (usize, &PathView<'_>), b: (usize, &PathView<'_>)) -> Result<f64> {
    let (i, w) = a;
    let (j, v) = b;
    if w.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            got: v.dim(),
        });
    }
    if !w.grid().compatible(&v.grid()) || w.grid().steps() != v.grid().steps() {
        return Err(Error::GridMismatch(
            "pseudo-distance requires a common grid".into(),
        ));
    }
    let n = w.grid().steps();
    if i > n || j > n {
        return Err(Error::IndexOutOfRange { index: i.max(j), max: n });
    }
    let d = w.dim();
    let mut sup = 0.0f64;
    for k in 0..=n {
        let pa = w.point(k.min(i));
        let pb = v.point(k.min(j));
        let mut s = 0.0;
        for c in 0..d {
            s += (pa[c] - pb[c]).powi(2);
        }
        sup = sup.max(s.sqrt());
    }
    Ok((w.grid().time(i) - v.grid().time(j)).abs() + sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn path(n: usize, vals: &[f64]) -> DiscretePath {
        DiscretePath::scalar(grid(n), vals.to_vec()).unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = grid(4);
        assert_eq!(g.spacing(), 0.25);
        assert_eq!(g.time(2), 0.5);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
    }

    #[test]
    fn path_requires_origin() {
        assert!(DiscretePath::scalar(grid(2), vec![1.0, 2.0, 3.0]).is_err());
        assert!(DiscretePath::scalar(grid(2), vec![0.0, 2.0, 3.0]).is_ok());
        assert!(DiscretePath::scalar(grid(2), vec![0.0, f64::NAN, 3.0]).is_err());
    }

    #[test]
    fn concat_examples() {
        // Paste (0, 2, 1) onto (0, 1, 2, 3) at i = 1: values after i are
        // anchor 1 plus suffix increments.
        let w = path(3, &[0.0, 1.0, 2.0, 3.0]);
        let sg = grid(3).suffix(1).unwrap();
        let s = DiscretePath::scalar(sg, vec![0.0, 2.0, 1.0]).unwrap();
        let c = concat(&w.view(), 1, &s.view()).unwrap();
        assert_eq!(c.values(), &[0.0, 1.0, 3.0, 2.0]);

        // Zero suffix freezes the path at w_i.
        let z = DiscretePath::zero(sg, 1);
        let c = concat(&w.view(), 1, &z.view()).unwrap();
        assert_eq!(c.values(), &[0.0, 1.0, 1.0, 1.0]);

        // Concatenation at 0 rebuilds the suffix.
        let s0 = DiscretePath::scalar(grid(3), vec![0.0, -1.0, 0.5, 2.0]).unwrap();
        let c = concat(&w.view(), 0, &s0.view()).unwrap();
        assert_eq!(c.values(), s0.values());
    }

    #[test]
    fn concat_rejects_bad_suffix() {
        let w = path(3, &[0.0, 1.0, 2.0, 3.0]);
        let sg = grid(3).suffix(1).unwrap();
        // wrong length
        let s = DiscretePath::scalar(grid(3), vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(concat(&w.view(), 1, &s.view()).is_err());
        // nonzero origin
        let bad = DiscretePath {
            grid: sg,
            dim: 1,
            values: vec![1.0, 1.0, 1.0],
        };
        assert!(concat(&w.view(), 1, &bad.view()).is_err());
    }

    #[test]
    fn sup_norm_examples() {
        let w = path(3, &[0.0, 1.0, -3.0, 2.0]);
        assert_eq!(w.view().sup_norm(0), 0.0);
        assert_eq!(w.view().sup_norm(1), 1.0);
        assert_eq!(w.view().sup_norm(2), 3.0);
        assert_eq!(w.view().sup_norm(3), 3.0);
    }

    #[test]
    fn running_integral_left_endpoint() {
        let w = path(4, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        // h = 0.25, sum_{j<3} w_j = 0 + 1 + 2 = 3
        assert_relative_eq!(w.view().running_integral(3, 0), 0.75, max_relative = 1e-15);
        assert_eq!(w.view().running_integral(0, 0), 0.0);
    }

    #[test]
    fn pseudo_distance_examples() {
        // Same path stopped at different indices where it is flat: only the
        // time term contributes.
        let w = path(4, &[0.0, 1.0, 1.0, 1.0, 1.0]);
        let d = pseudo_distance((1, &w.view()), (2, &w.view())).unwrap();
        assert_relative_eq!(d, 0.25, max_relative = 1e-15);

        // Distinct paths at the same index.
        let v = path(4, &[0.0, 1.0, 2.0, 1.0, 1.0]);
        let d = pseudo_distance((2, &w.view()), (2, &v.view())).unwrap();
        assert_relative_eq!(d, 1.0, max_relative = 1e-15);

        let d = pseudo_distance((4, &w.view()), (4, &w.view())).unwrap();
        assert_eq!(d, 0.0);
    }

    proptest! {
        #[test]
        fn pseudo_distance_is_symmetric_and_triangle(
            raw_a in proptest::collection::vec(-5.0f64..5.0, 4),
            raw_b in proptest::collection::vec(-5.0f64..5.0, 4),
            raw_c in proptest::collection::vec(-5.0f64..5.0, 4),
            ia in 0usize..=4, ib in 0usize..=4, ic in 0usize..=4,
        ) {
            let mk = |raw: &[f64]| {
                let mut v = vec![0.0];
                v.extend_from_slice(raw);
                path(4, &v)
            };
            let (a, b, c) = (mk(&raw_a), mk(&raw_b), mk(&raw_c));
            let dab = pseudo_distance((ia, &a.view()), (ib, &b.view())).unwrap();
            let dba = pseudo_distance((ib, &b.view()), (ia, &a.view())).unwrap();
            prop_assert!((dab - dba).abs() <= 1e-12);
            let dac = pseudo_distance((ia, &a.view()), (ic, &c.view())).unwrap();
            let dcb = pseudo_distance((ic, &c.view()), (ib, &b.view())).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-12);
            let daa = pseudo_distance((ia, &a.view()), (ia, &a.view())).unwrap();
            prop_assert_eq!(daa, 0.0);
        }

        #[test]
        fn concat_is_prefix_preserving(
            raw in proptest::collection::vec(-3.0f64..3.0, 6),
            suf in proptest::collection::vec(-3.0f64..3.0, 6),
            i in 0usize..6,
        ) {
            let mut v = vec![0.0];
            v.extend_from_slice(&raw);
            let w = path(6, &v);
            let sg = grid(6).suffix(i).unwrap();
            let mut s = vec![0.0];
            s.extend_from_slice(&suf[..6 - i]);
            let sp = DiscretePath::scalar(sg, s).unwrap();
            let c = concat(&w.view(), i, &sp.view()).unwrap();
            for j in 0..=i {
                prop_assert_eq!(c.point(j)[0], w.point(j)[0]);
            }
            // the tail is the anchored suffix, bit for bit as constructed
            for j in (i + 1)..=6 {
                prop_assert_eq!(c.point(j)[0], w.point(i)[0] + sp.point(j - i)[0]);
            }
        }
    }
}
