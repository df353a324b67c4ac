//! Deterministic parallel reductions and small statistics helpers.
//!
//! Every parallel reduction in this crate goes through the block-structured
//! helpers below: the input is cut into fixed-size blocks, block partials are
//! computed in parallel, and the partials are folded sequentially in block
//! order. The result is therefore a pure function of the input, independent
//! of the number of worker threads, and identical to a single-threaded run
//! of the same blocked algorithm.

use rayon::prelude::*;

/// Fixed block length for deterministic reductions. Must not depend on the
/// thread count, otherwise results would change with `--threads`.
pub const REDUCTION_BLOCK: usize = 4096;

/// Sum of a slice using fixed-size blocks folded in order.
pub fn det_sum(values: &[f64]) -> f64 {
    if values.len() <= REDUCTION_BLOCK {
        return values.iter().sum();
    }
    values
        .par_chunks(REDUCTION_BLOCK)
        .map(|chunk| chunk.iter().sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Deterministic blocked map-reduce over `0..n`.
///
/// `map` produces a partial for one block of indices; partials are combined
/// sequentially in block order with `fold`.
pub fn par_block_fold<T, M, F>(n: usize, map: M, init: T, fold: F) -> T
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync,
    F: Fn(T, T) -> T,
{
    if n == 0 {
        return init;
    }
    let blocks: Vec<T> = (0..n.div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCTION_BLOCK;
            let hi = (lo + REDUCTION_BLOCK).min(n);
            map(lo..hi)
        })
        .collect();
    blocks.into_iter().fold(init, fold)
}

/// Mean and standard error of the mean.
#[cfg_attr(not(test), allow(dead_code))]
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of empty slice");
    let mean = det_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = par_block_fold(
        n,
        |r| r.map(|i| (values[i] - mean).powi(2)).sum::<f64>(),
        0.0,
        |a, b| a + b,
    );
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Weighted mean `sum(w x) / sum(w)` with a standard error based on the
/// effective sample size `(sum w)^2 / sum(w^2)`.
pub fn weighted_mean_se(values: &[f64], weights: &[f64]) -> (f64, f64) {
    assert_eq!(values.len(), weights.len());
    let n = values.len();
    assert!(n > 0, "mean of empty slice");
    let (sw, swx) = par_block_fold(
        n,
        |r| {
            let mut sw = 0.0;
            let mut swx = 0.0;
            for i in r {
                sw += weights[i];
                swx += weights[i] * values[i];
            }
            (sw, swx)
        },
        (0.0, 0.0),
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    let mean = swx / sw;
    let (sw2, ssq) = par_block_fold(
        n,
        |r| {
            let mut sw2 = 0.0;
            let mut ssq = 0.0;
            for i in r {
                sw2 += weights[i] * weights[i];
                ssq += weights[i] * (values[i] - mean).powi(2);
            }
            (sw2, ssq)
        },
        (0.0, 0.0),
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    let n_eff = sw * sw / sw2;
    let var = ssq / sw; // weighted population variance
    let se = if n_eff > 1.0 {
        (var / (n_eff - 1.0)).max(0.0).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

/// Euclidean norm of a small vector.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
