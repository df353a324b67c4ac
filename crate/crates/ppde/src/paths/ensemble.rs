//! Path ensembles: N simulated paths with weights and an origin label.
//!
//! An ensemble records which measure its paths represent (`base` for the
//! driverless reference dynamics, `drifted` after adding a bounded drift,
//! `conditional` when the first `start` indices are a frozen prefix) and how
//! its driving Gaussian increments were produced, so that increments can be
//! reconstructed after a dump/load round trip. Values are stored path-major;
//! the serialized dump is columnar (time-major) with a JSON sidecar.

use super::{DiscretePath, PathView, TimeGrid};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Which probability measure the ensemble paths were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureTag {
    /// Reference dynamics `X_{i+1} = X_i + sigma dB_i`.
    Base,
    /// Drift-perturbed dynamics with a named bounded control.
    Drifted { control: String },
    /// Paths agree with a fixed prefix up to `start`; the suffix is fresh.
    Conditional { start: usize },
}

impl MeasureTag {
    pub fn start_index(&self) -> usize {
        match self {
            MeasureTag::Conditional { start } => *start,
            _ => 0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MeasureTag::Base => "base".into(),
            MeasureTag::Drifted { control } => format!("drifted({control})"),
            MeasureTag::Conditional { start } => format!("conditional({start})"),
        }
    }
}

/// How the stored Gaussian increments were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementSource {
    /// Counter-based per-path streams keyed by (seed, path index); the
    /// increment at a step is a pure function of (seed, path, step).
    Stream,
    /// Increments equal path differences (valid only for identity
    /// diffusion, e.g. enumerated binary-tree ensembles).
    PathDifferences,
}

/// N discrete paths on a common grid, with per-path weights, the seed they
/// were generated from, and their measure tag.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    /// Path-major values: `values[p * (n+1) * d + i * d + c]`.
    values: Vec<f64>,
    /// Path-major Gaussian increments: `increments[p * n * d + i * d + c]`.
    /// For conditional ensembles, entries before `start` are zero.
    increments: Vec<f64>,
    weights: Vec<f64>,
    seed: u64,
    measure: MeasureTag,
    increment_source: IncrementSource,
}

impl PathEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        grid: TimeGrid,
        dim: usize,
        n_paths: usize,
        values: Vec<f64>,
        increments: Vec<f64>,
        weights: Vec<f64>,
        seed: u64,
        measure: MeasureTag,
        increment_source: IncrementSource,
    ) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let n = grid.steps();
        if values.len() != n_paths * (n + 1) * dim {
            return Err(Error::DimensionMismatch {
                expected: n_paths * (n + 1) * dim,
                got: values.len(),
            });
        }
        if increments.len() != n_paths * n * dim {
            return Err(Error::DimensionMismatch {
                expected: n_paths * n * dim,
                got: increments.len(),
            });
        }
        if weights.len() != n_paths {
            return Err(Error::DimensionMismatch {
                expected: n_paths,
                got: weights.len(),
            });
        }
        Ok(PathEnsemble {
            grid,
            dim,
            n_paths,
            values,
            increments,
            weights,
            seed,
            measure,
            increment_source,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn measure(&self) -> &MeasureTag {
        &self.measure
    }

    pub fn increment_source(&self) -> IncrementSource {
        self.increment_source
    }

    /// First index at which the paths genuinely branch (0 unless the
    /// ensemble is conditional on a prefix).
    pub fn start_index(&self) -> usize {
        self.measure.start_index()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replace the weights (e.g. with Girsanov reweighting factors).
    pub fn with_weights(mut self, weights: Vec<f64>, measure: MeasureTag) -> Result<Self> {
        if weights.len() != self.n_paths {
            return Err(Error::DimensionMismatch {
                expected: self.n_paths,
                got: weights.len(),
            });
        }
        self.weights = weights;
        self.measure = measure;
        Ok(self)
    }

    /// Full view of path `p`.
    pub fn path_view(&self, p: usize) -> PathView<'_> {
        let stride = (self.grid.steps() + 1) * self.dim;
        PathView::from_raw(self.grid, self.dim, &self.values[p * stride..(p + 1) * stride])
    }

    /// View of the first `i + 1` points of path `p`.
    pub fn prefix_view(&self, p: usize, i: usize) -> PathView<'_> {
        let stride = (self.grid.steps() + 1) * self.dim;
        PathView::from_raw(
            self.grid,
            self.dim,
            &self.values[p * stride..p * stride + (i + 1) * self.dim],
        )
    }

    /// Owned copy of path `p`.
    pub fn path(&self, p: usize) -> DiscretePath {
        self.path_view(p).to_owned_path()
    }

    /// Gaussian increment driving step `i` of path `p` (length `d`).
    /// Flat value storage, exposed for bit-exactness assertions in tests.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn values_raw(&self) -> &[f64] {
        &self.values
    }

    pub fn increment(&self, p: usize, i: usize) -> &[f64] {
        let stride = self.grid.steps() * self.dim;
        let off = p * stride + i * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// Serialize to `<stem>.bin` (columnar, little-endian f64: for each grid
    /// index, all paths, all coordinates), `<stem>.weights.bin`, and a JSON
    /// sidecar `<stem>.json` with grid/seed/measure metadata.
    pub fn dump(&self, stem: &Path) -> Result<()> {
        let n = self.grid.steps();
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        let stride = (n + 1) * self.dim;
        for i in 0..=n {
            for p in 0..self.n_paths {
                for c in 0..self.dim {
                    let v = self.values[p * stride + i * self.dim + c];
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(stem.with_extension("bin"), &buf)?;

        let mut wbuf = Vec::with_capacity(self.n_paths * 8);
        for w in &self.weights {
            wbuf.extend_from_slice(&w.to_le_bytes());
        }
        std::fs::write(stem.with_extension("weights.bin"), &wbuf)?;

        let sidecar = Sidecar {
            format_version: 1,
            horizon: self.grid.horizon(),
            steps: n,
            dim: self.dim,
            n_paths: self.n_paths,
            seed: self.seed,
            measure: self.measure.clone(),
            increment_source: self.increment_source,
            layout: "columnar".into(),
        };
        let mut f = std::fs::File::create(stem.with_extension("json"))?;
        f.write_all(serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Load an ensemble dumped by [`PathEnsemble::dump`]. Increments are
    /// reconstructed from the sidecar metadata: regenerated from the seed
    /// for stream ensembles, recomputed as path differences otherwise.
    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let grid = TimeGrid::new(sidecar.horizon, sidecar.steps)?;
        let (n, d, np) = (sidecar.steps, sidecar.dim, sidecar.n_paths);

        let mut raw = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut raw)?;
        if raw.len() != np * (n + 1) * d * 8 {
            return Err(Error::DimensionMismatch {
                expected: np * (n + 1) * d * 8,
                got: raw.len(),
            });
        }
        let stride = (n + 1) * d;
        let mut values = vec![0.0f64; np * stride];
        let mut k = 0;
        for i in 0..=n {
            for p in 0..np {
                for c in 0..d {
                    let bytes: [u8; 8] = raw[k * 8..(k + 1) * 8].try_into().unwrap();
                    values[p * stride + i * d + c] = f64::from_le_bytes(bytes);
                    k += 1;
                }
            }
        }

        let mut wraw = Vec::new();
        std::fs::File::open(stem.with_extension("weights.bin"))?.read_to_end(&mut wraw)?;
        if wraw.len() != np * 8 {
            return Err(Error::DimensionMismatch {
                expected: np * 8,
                got: wraw.len(),
            });
        }
        let weights: Vec<f64> = wraw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let increments = match sidecar.increment_source {
            IncrementSource::Stream => crate::sde::regenerate_increments(
                sidecar.seed,
                np,
                n,
                d,
                grid.spacing(),
                sidecar.measure.start_index(),
            ),
            IncrementSource::PathDifferences => {
                let mut inc = vec![0.0f64; np * n * d];
                for p in 0..np {
                    for i in 0..n {
                        for c in 0..d {
                            inc[p * n * d + i * d + c] = values[p * stride + (i + 1) * d + c]
                                - values[p * stride + i * d + c];
                        }
                    }
                }
                inc
            }
        };

        PathEnsemble::from_parts(
            grid,
            d,
            np,
            values,
            increments,
            weights,
            sidecar.seed,
            sidecar.measure,
            sidecar.increment_source,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    horizon: f64,
    steps: usize,
    dim: usize,
    n_paths: usize,
    seed: u64,
    measure: MeasureTag,
    increment_source: IncrementSource,
    layout: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::Diffusion;
    use crate::sde::{simulate_base, RngStream};

    #[test]
    fn dump_load_round_trip() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate_base(&Diffusion::identity(1), grid, 64, RngStream::new(99)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ens");
        ens.dump(&stem).unwrap();
        let back = PathEnsemble::load(&stem).unwrap();
        assert_eq!(back.n_paths(), 64);
        assert_eq!(back.values_raw(), ens.values_raw());
        assert_eq!(back.weights(), ens.weights());
        // increments regenerate bit-exactly from the stream convention
        for p in 0..64 {
            for i in 0..8 {
                assert_eq!(back.increment(p, i), ens.increment(p, i));
            }
        }
    }
}
