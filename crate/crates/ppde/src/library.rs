//! Built-in catalog of named diffusions, generators, and path functionals.
//!
//! Configuration files refer to models by name plus a flat numeric
//! parameter map; this module resolves those references. Every resolver
//! takes the config field path it is resolving so unknown-name errors can
//! point at the offending key and list the alternatives.
//!
//! Direction-vector parameters follow one convention throughout: component
//! `c` is the key `e<c>`, defaulting to the first basis vector (`e0 = 1`,
//! all others `0`), each component individually overridable.

use crate::error::{Error, Result};
use crate::paths::{Diffusion, Driver, ScalarProcess};
use crate::util::norm2;
use std::collections::BTreeMap;

/// Flat numeric parameters attached to a named component. A `BTreeMap`
/// keeps resolved-config serialization deterministic.
pub type Params = BTreeMap<String, f64>;

/// Diffusion names resolvable by [`make_sigma`].
pub const SIGMA_NAMES: &[&str] = &["identity", "constant", "tanh"];

/// Generator names resolvable by [`make_driver`].
pub const DRIVER_NAMES: &[&str] = &["zero", "constant", "linear", "absolute", "trig"];

/// Functional names resolvable by [`make_process`].
pub const PROCESS_NAMES: &[&str] = &[
    "linear",
    "square",
    "abs",
    "running-max",
    "integral-average",
    "sine",
    "time",
    "bump",
    "heat-square",
    "constant",
];

fn get(params: &Params, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn direction(params: &Params, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| get(params, &format!("e{c}"), if c == 0 { 1.0 } else { 0.0 }))
        .collect()
}

fn dot(e: &[f64], point: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in e.iter().zip(point) {
        acc += a * b;
    }
    acc
}

fn unknown(field: &str, kind: &str, name: &str, available: &[&str]) -> Error {
    Error::config(
        field,
        format!("unknown {kind} `{name}`; available: {}", available.join(", ")),
    )
}

/// Resolve a named diffusion coefficient.
///
/// - `identity`: the unit matrix.
/// - `constant`: `scale * I` (param `scale`, default 1), with individual
///   entries overridable through `m<row><col>` keys.
/// - `tanh`: the path-dependent scalar multiple
///   `(1 + c * tanh(running sup-norm)) * I` (param `c`, default 0.5).
pub fn make_sigma(field: &str, name: &str, dim: usize, params: &Params) -> Result<Diffusion> {
    if dim == 0 {
        return Err(Error::config(field, "dimension must be at least 1"));
    }
    match name {
        "identity" => Ok(Diffusion::identity(dim)),
        "constant" => {
            let scale = get(params, "scale", 1.0);
            let mut matrix = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    let default = if r == c { scale } else { 0.0 };
                    matrix[r * dim + c] = get(params, &format!("m{r}{c}"), default);
                }
            }
            Diffusion::constant(dim, matrix)
        }
        "tanh" => {
            let c = get(params, "c", 0.5);
            Ok(Diffusion::new(dim, move |i, path, out| {
                let s = 1.0 + c * path.sup_norm(i).tanh();
                for r in 0..dim {
                    for k in 0..dim {
                        out[r * dim + k] = if r == k { s } else { 0.0 };
                    }
                }
            }))
        }
        _ => Err(unknown(field, "sigma", name, SIGMA_NAMES)),
    }
}

/// Resolve a named generator `F(t, omega, y, z)`; the `z` slot receives
/// `sigma^T Z` from the solver.
///
/// - `zero`.
/// - `constant`: `c` (param `c`, default 0).
/// - `linear`: `a y + b sum(z)` (params `a`, `b`, defaults 0).
/// - `absolute`: `level |z|` (param `level`, defaulting to
///   `default_level`) — the sublinear-expectation generator exposed for
///   direct runs.
/// - `trig`: `p cos(y) + q sum(z)` (params `p`, `q`, defaults 0.5, 0.3).
pub fn make_driver(
    field: &str,
    name: &str,
    params: &Params,
    default_level: f64,
) -> Result<Driver> {
    match name {
        "zero" => Ok(Driver::zero()),
        "constant" => Ok(Driver::constant(get(params, "c", 0.0))),
        "linear" => {
            let a = get(params, "a", 0.0);
            let b = get(params, "b", 0.0);
            Ok(Driver::new(move |_, _, y, z| {
                a * y + b * z.iter().sum::<f64>()
            }))
        }
        "absolute" => {
            let level = get(params, "level", default_level);
            if !(level >= 0.0) {
                return Err(Error::config(
                    field,
                    format!("absolute driver needs a nonnegative level, got {level}"),
                ));
            }
            Ok(Driver::new(move |_, _, _, z| level * norm2(z)))
        }
        "trig" => {
            let p = get(params, "p", 0.5);
            let q = get(params, "q", 0.3);
            Ok(Driver::new(move |_, _, y, z| {
                p * y.cos() + q * z.iter().sum::<f64>()
            }))
        }
        _ => Err(unknown(field, "driver", name, DRIVER_NAMES)),
    }
}

/// Resolve a named path functional, usable as terminal payoff, obstacle,
/// or candidate solution. All accept an additive `shift` parameter
/// (default 0); `e<c>` keys set the direction vector where one applies.
///
/// - `linear`: `e . omega_t + shift`.
/// - `square`: `|omega_t|^2 + shift`.
/// - `abs`: `|e . omega_t| + shift`.
/// - `running-max`: `max_{s <= t} e . omega_s + shift`.
/// - `integral-average`: `(1/t) integral_0^t e . omega_s ds + shift`
///   (zero at `t = 0`, where every path sits at the origin).
/// - `sine`: `sin(e . omega_t) + shift`.
/// - `time`: `a t + shift` (param `a`, default 1).
/// - `bump`: `-(t - a)^2 - b t + shift` (params `a` = 0.5, `b` = 0.1).
/// - `heat-square`: `|omega_t|^2 + (T - t) + shift`.
/// - `constant`: `c` (param `c`, default 0).
pub fn make_process(field: &str, name: &str, params: &Params) -> Result<ScalarProcess> {
    let shift = get(params, "shift", 0.0);
    let p = params.clone();
    match name {
        "linear" => Ok(ScalarProcess::new(move |i, path| {
            let e = direction(&p, path.dim());
            dot(&e, path.point(i)) + shift
        })),
        "square" => Ok(ScalarProcess::new(move |i, path| {
            let x = path.point(i);
            let mut acc = shift;
            for v in x {
                acc += v * v;
            }
            acc
        })),
        "abs" => Ok(ScalarProcess::new(move |i, path| {
            let e = direction(&p, path.dim());
            dot(&e, path.point(i)).abs() + shift
        })),
        "running-max" => Ok(ScalarProcess::new(move |i, path| {
            let e = direction(&p, path.dim());
            let mut best = f64::NEG_INFINITY;
            for j in 0..=i {
                best = best.max(dot(&e, path.point(j)));
            }
            best + shift
        })),
        "integral-average" => Ok(ScalarProcess::new(move |i, path| {
            if i == 0 {
                return shift;
            }
            let e = direction(&p, path.dim());
            let mut acc = 0.0;
            for (c, w) in e.iter().enumerate() {
                acc += w * path.running_integral(i, c);
            }
            acc / path.grid().time(i) + shift
        })),
        "sine" => Ok(ScalarProcess::new(move |i, path| {
            let e = direction(&p, path.dim());
            dot(&e, path.point(i)).sin() + shift
        })),
        "time" => {
            let a = get(params, "a", 1.0);
            Ok(ScalarProcess::new(move |i, path| {
                a * path.grid().time(i) + shift
            }))
        }
        "bump" => {
            let a = get(params, "a", 0.5);
            let b = get(params, "b", 0.1);
            Ok(ScalarProcess::new(move |i, path| {
                let t = path.grid().time(i);
                -(t - a) * (t - a) - b * t + shift
            }))
        }
        "heat-square" => Ok(ScalarProcess::new(move |i, path| {
            let x = path.point(i);
            let mut acc = shift + path.grid().horizon() - path.grid().time(i);
            for v in x {
                acc += v * v;
            }
            acc
        })),
        "constant" => Ok(ScalarProcess::constant(get(params, "c", 0.0))),
        _ => Err(unknown(field, "functional", name, PROCESS_NAMES)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{DiscretePath, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn params(entries: &[(&str, f64)]) -> Params {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    fn path() -> DiscretePath {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        DiscretePath::scalar(grid, vec![0.0, 0.5, -0.25, 1.0, 0.75]).unwrap()
    }

    #[test]
    fn sigma_catalog() {
        let p = path();
        let s = make_sigma("model.sigma", "identity", 1, &Params::new()).unwrap();
        let mut buf = [0.0];
        s.eval_into(2, &p.view(), &mut buf);
        assert_eq!(buf[0], 1.0);

        let s = make_sigma("model.sigma", "constant", 2, &params(&[("scale", 2.0), ("m01", 0.5)]))
            .unwrap();
        let mut buf = [0.0; 4];
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let p2 = DiscretePath::zero(grid, 2);
        s.eval_into(0, &p2.view(), &mut buf);
        assert_eq!(buf, [2.0, 0.5, 0.0, 2.0]);

        let s = make_sigma("model.sigma", "tanh", 1, &params(&[("c", 0.5)])).unwrap();
        s.eval_into(3, &p.view(), &mut buf[..1]);
        assert_abs_diff_eq!(buf[0], 1.0 + 0.5 * 1.0f64.tanh(), epsilon = 1e-15);

        let Err(err) = make_sigma("model.sigma", "nope", 1, &Params::new()) else {
            panic!("expected an unknown-name error")
        };
        let msg = err.to_string();
        assert!(msg.contains("model.sigma") && msg.contains("identity"), "{msg}");
    }

    #[test]
    fn driver_catalog() {
        let p = path();
        let v = p.view();
        let d = make_driver("driver.name", "zero", &Params::new(), 0.0).unwrap();
        assert_eq!(d.eval(1, &v, 3.0, &[2.0]), 0.0);

        let d = make_driver("driver.name", "constant", &params(&[("c", 0.7)]), 0.0).unwrap();
        assert_eq!(d.eval(1, &v, 3.0, &[2.0]), 0.7);

        let d = make_driver("driver.name", "linear", &params(&[("a", 0.5), ("b", 2.0)]), 0.0)
            .unwrap();
        assert_eq!(d.eval(1, &v, 3.0, &[2.0]), 5.5);

        let d = make_driver("driver.name", "absolute", &Params::new(), 0.5).unwrap();
        assert_eq!(d.eval(1, &v, 3.0, &[-2.0]), 1.0);
        assert!(
            make_driver("driver.name", "absolute", &params(&[("level", -1.0)]), 0.0).is_err()
        );

        let d = make_driver("driver.name", "trig", &Params::new(), 0.0).unwrap();
        assert_abs_diff_eq!(
            d.eval(1, &v, 1.0, &[2.0]),
            0.5 * 1.0f64.cos() + 0.6,
            epsilon = 1e-15
        );

        let Err(err) = make_driver("driver.name", "nope", &Params::new(), 0.0) else {
            panic!("expected an unknown-name error")
        };
        assert!(err.to_string().contains("absolute"));
    }

    #[test]
    fn process_catalog() {
        let p = path();
        let v = p.view();
        let cases: &[(&str, Params, f64)] = &[
            ("linear", Params::new(), 1.0),
            ("linear", params(&[("shift", 0.5)]), 1.5),
            ("square", Params::new(), 1.0),
            ("abs", params(&[("e0", -1.0)]), 1.0),
            ("running-max", Params::new(), 1.0),
            ("sine", Params::new(), 1.0f64.sin()),
            ("time", params(&[("a", 2.0)]), 1.5),
            ("bump", Params::new(), -(0.75f64 - 0.5).powi(2) - 0.075),
            ("heat-square", Params::new(), 1.0 + 0.25),
            ("constant", params(&[("c", -3.0)]), -3.0),
        ];
        for (name, ps, expected) in cases {
            let f = make_process("payoff.name", name, ps).unwrap();
            assert_abs_diff_eq!(f.eval(3, &v), *expected, epsilon = 1e-12);
        }

        // left-endpoint integral of (0, 0.5) over [0, 0.5] divided by t
        let f = make_process("payoff.name", "integral-average", &Params::new()).unwrap();
        assert_eq!(f.eval(0, &v), 0.0);
        let integral = (0.0 + 0.5) * 0.25;
        assert_abs_diff_eq!(f.eval(2, &v), integral / 0.5, epsilon = 1e-12);

        let Err(err) = make_process("snell.obstacle", "nope", &Params::new()) else {
            panic!("expected an unknown-name error")
        };
        let msg = err.to_string();
        assert!(msg.contains("snell.obstacle") && msg.contains("running-max"), "{msg}");
    }
}
