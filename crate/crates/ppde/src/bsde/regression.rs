//! Weighted ridge least squares on adapted path features.
//!
//! Conditional expectations are approximated by projecting on a small
//! dictionary of adapted features of the path prefix. The default basis is
//! the constant 1 together with powers (up to a configurable degree) of the
//! state coordinates, the running sup norm, and the running integral of each
//! coordinate — enough to span the value processes of the closed-form test
//! problems while staying cheap.
//!
//! The normal equations are column-equilibrated and a relative ridge is
//! added to every coefficient *except* the intercept, so regressing constant
//! targets reproduces them to round-off (a property several backward
//! recursions rely on: deterministic problems stay exact). All reductions
//! use fixed-order blocks, so fits are independent of the thread count.

use crate::error::{Error, Result};
use crate::paths::{PathEnsemble, PathView};
use crate::util::{par_block_fold, weighted_mean_se};
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use std::sync::Arc;

type FeatureFill = Arc<dyn Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum FeatureMap {
    /// 1, then powers 1..=degree of each of: state coordinates, running sup
    /// norm, running integral per coordinate.
    Default,
    Custom { len: usize, fill: FeatureFill },
}

/// Regression configuration: polynomial degree, relative ridge, feature map.
#[derive(Clone)]
pub struct RegressionBasis {
    degree: usize,
    ridge: f64,
    features: FeatureMap,
}

impl RegressionBasis {
    /// Default basis of the given polynomial degree (`>= 1`) with relative
    /// ridge `1e-12` — small enough that in-span targets are reproduced to
    /// ~1e-8 relative accuracy despite basis collinearity, large enough to
    /// dominate the ~1e-14 assembly round-off of the equilibrated normal
    /// matrix and keep degenerate feature sets solvable.
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "polynomial degree must be at least 1");
        RegressionBasis {
            degree,
            ridge: 1e-12,
            features: FeatureMap::Default,
        }
    }

    /// Override the relative ridge (`>= 0`), applied to the equilibrated
    /// normal matrix, intercept excluded.
    pub fn with_ridge(mut self, ridge: f64) -> Self {
        assert!(ridge >= 0.0);
        self.ridge = ridge;
        self
    }

    /// Replace the feature dictionary. `fill` writes `len` features of the
    /// prefix `(i, omega)`; adaptedness is the caller's contract. A constant
    /// column should be included for the exact-constant property.
    pub fn with_features(
        mut self,
        len: usize,
        fill: impl Fn(usize, &PathView<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!(len >= 1);
        self.features = FeatureMap::Custom {
            len,
            fill: Arc::new(fill),
        };
        self
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Number of regression columns for dimension `d`.
    pub fn feature_count(&self, dim: usize) -> usize {
        match &self.features {
            FeatureMap::Default => 1 + self.degree * (2 * dim + 1),
            FeatureMap::Custom { len, .. } => *len,
        }
    }

    /// Write the feature row for `(i, omega)` into `out`.
    pub fn fill_features(&self, i: usize, omega: &PathView<'_>, out: &mut [f64]) {
        match &self.features {
            FeatureMap::Default => {
                let d = omega.dim();
                out[0] = 1.0;
                let mut k = 1;
                let mut raw = |v: f64, k: &mut usize| {
                    let mut pw = 1.0;
                    for _ in 0..self.degree {
                        pw *= v;
                        out[*k] = pw;
                        *k += 1;
                    }
                };
                for c in 0..d {
                    raw(omega.point(i)[c], &mut k);
                }
                raw(omega.sup_norm(i), &mut k);
                for c in 0..d {
                    raw(omega.running_integral(i, c), &mut k);
                }
            }
            FeatureMap::Custom { fill, .. } => fill(i, omega, out),
        }
    }
}

/// One fitted regression: predictions for every path, coefficients, and
/// dispersion diagnostics.
pub struct StepFit {
    /// Predicted conditional expectation per path (adapted: a function of
    /// the features at the regression index).
    pub fitted: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Weighted root-mean-square residual over contributing paths.
    pub weighted_rmse: f64,
    /// Weighted mean of the raw targets with its standard error (the
    /// statistical error of a plain collapse at this step).
    pub target_mean: f64,
    pub target_mean_se: f64,
}

/// Design matrix and factored normal equations at one grid index, reusable
/// across several target vectors (continuation value and each gradient
/// component share it).
pub struct StepDesign {
    k: usize,
    n_paths: usize,
    /// Row-major `n_paths x k` design matrix.
    x: Vec<f64>,
    /// Effective weights (ensemble weight, zeroed for masked-out paths).
    w: Vec<f64>,
    scale: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl StepDesign {
    /// Assemble and factor the weighted normal equations at index `i`.
    /// Paths with `alive[p] == false` get weight zero (used by horizon and
    /// stopped-target recursions); predictions are still produced for them.
    pub fn build(
        ens: &PathEnsemble,
        i: usize,
        basis: &RegressionBasis,
        alive: Option<&[bool]>,
    ) -> Result<Self> {
        let n = ens.n_paths();
        let k = basis.feature_count(ens.dim());
        let mut x = vec![0.0f64; n * k];
        x.par_chunks_mut(k).enumerate().for_each(|(p, row)| {
            basis.fill_features(i, &ens.path_view(p), row);
        });
        let w: Vec<f64> = match alive {
            None => ens.weights().to_vec(),
            Some(mask) => ens
                .weights()
                .iter()
                .zip(mask)
                .map(|(w, a)| if *a { *w } else { 0.0 })
                .collect(),
        };
        let sum_w: f64 = crate::util::det_sum(&w);
        if !(sum_w > 0.0) {
            return Err(Error::EmptyEnsemble);
        }

        // lower triangle of X^T W X, accumulated in fixed-order blocks
        let tri_len = k * (k + 1) / 2;
        let tri = par_block_fold(
            n,
            |range| {
                let mut acc = vec![0.0f64; tri_len];
                for p in range {
                    let wp = w[p];
                    if wp == 0.0 {
                        continue;
                    }
                    let row = &x[p * k..(p + 1) * k];
                    let mut t = 0;
                    for r in 0..k {
                        let wr = wp * row[r];
                        for c in 0..=r {
                            acc[t] += wr * row[c];
                            t += 1;
                        }
                    }
                }
                acc
            },
            vec![0.0f64; tri_len],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
        let mut a = DMatrix::<f64>::zeros(k, k);
        {
            let mut t = 0;
            for r in 0..k {
                for c in 0..=r {
                    a[(r, c)] = tri[t];
                    a[(c, r)] = tri[t];
                    t += 1;
                }
            }
        }

        // column equilibration + ridge off the intercept
        let mut scale = vec![1.0f64; k];
        for (j, s) in scale.iter_mut().enumerate() {
            let d = a[(j, j)];
            if d > 0.0 && d.is_finite() {
                *s = 1.0 / d.sqrt();
            }
        }
        let mut tilde = DMatrix::<f64>::zeros(k, k);
        for r in 0..k {
            for c in 0..k {
                tilde[(r, c)] = a[(r, c)] * scale[r] * scale[c];
            }
        }
        for j in 1..k {
            tilde[(j, j)] += basis.ridge();
        }

        let chol = match Cholesky::new(tilde.clone()) {
            Some(c) => c,
            None => {
                let eig = tilde.symmetric_eigenvalues();
                let max = eig.iter().cloned().fold(f64::MIN, f64::max);
                let min = eig.iter().cloned().fold(f64::MAX, f64::min);
                let cond = if min.abs() > 0.0 { max / min } else { f64::INFINITY };
                return Err(Error::SingularRegression { cond });
            }
        };
        Ok(StepDesign {
            k,
            n_paths: n,
            x,
            w,
            scale,
            chol,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.k
    }

    /// Fit one target vector against the factored design.
    pub fn fit(&self, targets: &[f64]) -> Result<StepFit> {
        assert_eq!(targets.len(), self.n_paths);
        let k = self.k;
        let b = par_block_fold(
            self.n_paths,
            |range| {
                let mut acc = vec![0.0f64; k];
                for p in range {
                    let wp = self.w[p];
                    if wp == 0.0 {
                        continue;
                    }
                    let wy = wp * targets[p];
                    let row = &self.x[p * k..(p + 1) * k];
                    for (a, xv) in acc.iter_mut().zip(row) {
                        *a += wy * xv;
                    }
                }
                acc
            },
            vec![0.0f64; k],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
        let btilde = DVector::from_iterator(k, b.iter().zip(&self.scale).map(|(v, s)| v * s));
        let beta_tilde = self.chol.solve(&btilde);
        let coefficients: Vec<f64> = beta_tilde
            .iter()
            .zip(&self.scale)
            .map(|(v, s)| v * s)
            .collect();

        let fitted: Vec<f64> = (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let row = &self.x[p * k..(p + 1) * k];
                row.iter().zip(&coefficients).map(|(x, c)| x * c).sum()
            })
            .collect();

        let (ss, sw) = par_block_fold(
            self.n_paths,
            |range| {
                let mut ss = 0.0;
                let mut sw = 0.0;
                for p in range {
                    let wp = self.w[p];
                    if wp == 0.0 {
                        continue;
                    }
                    ss += wp * (targets[p] - fitted[p]).powi(2);
                    sw += wp;
                }
                (ss, sw)
            },
            (0.0, 0.0),
            |a, b| (a.0 + b.0, a.1 + b.1),
        );
        let weighted_rmse = (ss / sw).sqrt();
        let (target_mean, target_mean_se) = weighted_mean_se(targets, &self.w);
        if fitted.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "regression prediction",
                path: fitted.iter().position(|v| !v.is_finite()).unwrap_or(0),
                step: 0,
            });
        }
        Ok(StepFit {
            fitted,
            coefficients,
            weighted_rmse,
            target_mean,
            target_mean_se,
        })
    }
}

/// Project targets on the adapted features at index `i` of the ensemble:
/// returns predictions (one per path), coefficients, and diagnostics.
pub fn regress(
    ens: &PathEnsemble,
    i: usize,
    targets: &[f64],
    basis: &RegressionBasis,
) -> Result<StepFit> {
    StepDesign::build(ens, i, basis, None)?.fit(targets)
}
