//! Command dispatch: build model objects from a validated config, run the
//! experiment, and emit artifacts.
//!
//! Every command returns a JSON summary body; [`run`] wraps it with the
//! command name, the elapsed `runtime_ms`, and the fully resolved config,
//! then writes `resolved.toml` (always) and `summary.json` (when `json` is
//! among the output formats). Per-path CSV exports are capped at
//! `output.write_paths` paths; statistics always use the full ensemble.
//!
//! Determinism: all randomness derives from `solver.seed` through
//! counter-based per-path streams, and all reductions are block-structured,
//! so outputs are bit-identical across thread counts. `runtime_ms` is the
//! only field that varies between repeated runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

use super::config::{parse_mode, CandidateSection, ExperimentConfig};
use super::CommandKind;
use crate::bsde::{
    nonlinear_expectation, nonlinear_expectation_at, solve_bsde, BsdeSolution, RegressionBasis,
    Side,
};
use crate::library::{make_driver, make_process, make_sigma};
use crate::paths::{Diffusion, PathEnsemble, TimeGrid};
use crate::sde::{ensemble_mean, eval_column, simulate_base, RngStream};
use crate::snell::{
    brute_force_snell_tree, optimal_stopping_rule, snell_envelope, SnellSolution, StoppingRule,
};
use crate::viscosity::{
    comparison_experiment, martingale_property_test, sample_points, Candidate, CheckResult,
    ComparisonPlan, ViscosityReport,
};
use crate::Result;

/// What a run produced: the summary (also printed by the binary) and the
/// files written under the output directory.
pub struct RunArtifacts {
    pub summary: Value,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Materialize, validate, dispatch, and write artifacts.
pub fn run(kind: CommandKind, mut config: ExperimentConfig) -> Result<RunArtifacts> {
    config.materialize(kind);
    config.validate(kind)?;

    let out_dir = PathBuf::from(&config.output.dir);
    std::fs::create_dir_all(&out_dir)?;
    let want_csv = config.output.formats.iter().any(|f| f == "csv");
    let want_json = config.output.formats.iter().any(|f| f == "json");
    let csv_dir = want_csv.then_some(out_dir.as_path());

    let mut files = Vec::new();
    let started = Instant::now();
    let body = dispatch(kind, &config, csv_dir, &mut files)?;
    let runtime_ms = started.elapsed().as_millis() as u64;

    let mut summary = Map::new();
    summary.insert("command".into(), json!(kind.name()));
    for (k, v) in body {
        summary.insert(k, v);
    }
    summary.insert("runtime_ms".into(), json!(runtime_ms));
    summary.insert("config".into(), serde_json::to_value(&config)?);
    let summary = Value::Object(summary);

    files.push(write_text(&out_dir, "resolved.toml", &config.to_toml()?)?);
    if want_json {
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        files.push(write_text(&out_dir, "summary.json", &text)?);
    }
    Ok(RunArtifacts {
        summary,
        out_dir,
        files,
    })
}

fn dispatch(
    kind: CommandKind,
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    match kind {
        CommandKind::Simulate => cmd_simulate(cfg, csv_dir, files),
        CommandKind::Expectation => cmd_expectation(cfg, csv_dir, files),
        CommandKind::Bsde => cmd_bsde(cfg, csv_dir, files),
        CommandKind::Snell => cmd_snell(cfg, csv_dir, files),
        CommandKind::ViscosityCheck => cmd_viscosity(cfg, csv_dir, files),
        CommandKind::Compare => cmd_compare(cfg, csv_dir, files),
        CommandKind::Converge => cmd_converge(cfg, csv_dir, files),
    }
}

// ---------------------------------------------------------------------------
// Shared builders
// ---------------------------------------------------------------------------

struct Built {
    grid: TimeGrid,
    sigma: Diffusion,
    basis: RegressionBasis,
}

fn build(cfg: &ExperimentConfig) -> Result<Built> {
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.n)?;
    let sigma = make_sigma(
        "model.sigma",
        &cfg.model.sigma,
        cfg.model.d,
        &cfg.model.sigma_params,
    )?;
    let basis = RegressionBasis::new(cfg.solver.degree).with_ridge(cfg.solver.ridge);
    Ok(Built { grid, sigma, basis })
}

fn base_ensemble(cfg: &ExperimentConfig, b: &Built) -> Result<PathEnsemble> {
    simulate_base(
        &b.sigma,
        b.grid,
        cfg.solver.n_paths,
        RngStream::new(cfg.solver.seed),
    )
}

fn payoff_process(cfg: &ExperimentConfig) -> Result<crate::paths::ScalarProcess> {
    make_process("payoff.name", &cfg.payoff.name, &cfg.payoff.params)
}

fn driver_from(cfg: &ExperimentConfig) -> Result<crate::paths::Driver> {
    make_driver(
        "driver.name",
        &cfg.driver.name,
        &cfg.driver.params,
        cfg.model.gradient_bound,
    )
}

fn basis_json(basis: &RegressionBasis, dim: usize) -> Value {
    json!({
        "degree": basis.degree(),
        "ridge": basis.ridge(),
        "features": basis.feature_count(dim),
    })
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("summary bodies are JSON objects"),
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// CSV exports (per-path files are capped; statistics never are)
// ---------------------------------------------------------------------------

fn paths_csv(ens: &PathEnsemble, cap: usize) -> String {
    let n = ens.grid().steps();
    let grid = ens.grid();
    let mut s = String::from("path,index,t");
    for c in 0..ens.dim() {
        s.push_str(&format!(",w{c}"));
    }
    s.push('\n');
    for p in 0..cap.min(ens.n_paths()) {
        let view = ens.path_view(p);
        for i in 0..=n {
            s.push_str(&format!("{p},{i},{}", grid.time(i)));
            for &w in view.point(i) {
                s.push_str(&format!(",{w}"));
            }
            s.push('\n');
        }
    }
    s
}

fn bsde_csv(sol: &BsdeSolution, grid: TimeGrid, dim: usize, cap: usize) -> String {
    let n = sol.steps();
    let mut s = String::from("path,index,t,y");
    for c in 0..dim {
        s.push_str(&format!(",z{c}"));
    }
    s.push('\n');
    for p in 0..cap.min(sol.n_paths()) {
        for i in 0..=n {
            s.push_str(&format!("{p},{i},{},{}", grid.time(i), sol.y_at(p, i)));
            for c in 0..dim {
                if i < n {
                    s.push_str(&format!(",{}", sol.z_at(p, i, c)));
                } else {
                    s.push(',');
                }
            }
            s.push('\n');
        }
    }
    s
}

fn snell_csv(sol: &SnellSolution, grid: TimeGrid, rule: &StoppingRule, cap: usize) -> String {
    let n = sol.steps();
    let mut s = String::from("path,index,t,y,x,dk,stopped\n");
    for p in 0..cap.min(sol.n_paths()) {
        for i in 0..=n {
            let dk = if i < n { sol.k_at(p, i) } else { 0.0 };
            s.push_str(&format!(
                "{p},{i},{},{},{},{dk},{}\n",
                grid.time(i),
                sol.y_at(p, i),
                sol.obstacle_at(p, i),
                (i >= rule.index(p)) as u8
            ));
        }
    }
    s
}

fn report_csv(report: &ViscosityReport) -> Result<String> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV is ASCII"))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_simulate(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let b = build(cfg)?;
    let ens = base_ensemble(cfg, &b)?;
    let payoff = payoff_process(cfg)?;
    let terminal = eval_column(&payoff, &ens, b.grid.steps());
    let (mean, se) = ensemble_mean(&terminal, &ens);
    let written = cfg.output.write_paths.min(ens.n_paths());
    if let Some(dir) = csv_dir {
        files.push(write_text(dir, "paths.csv", &paths_csv(&ens, written))?);
    }
    Ok(obj(json!({
        "estimate": mean,
        "std_error": se,
        "payoff": cfg.payoff.name,
        "measure": ens.measure().label(),
        "N": cfg.solver.n_paths,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
        "paths_written": written,
    })))
}

fn cmd_expectation(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let s = cfg.expectation.as_ref().expect("materialized");
    let level = s.level.expect("materialized");
    let side = match s.side.as_str() {
        "upper" => Side::Upper,
        _ => Side::Lower,
    };
    let b = build(cfg)?;
    let target = payoff_process(cfg)?;
    let ens = base_ensemble(cfg, &b)?;
    let sol = nonlinear_expectation(&b.sigma, &target, level, side, &ens, &b.basis)?;
    if let Some(dir) = csv_dir {
        let text = bsde_csv(&sol, b.grid, cfg.model.d, cfg.output.write_paths);
        files.push(write_text(dir, "solution.csv", &text)?);
    }
    Ok(obj(json!({
        "estimate": sol.y0,
        "std_error": sol.y0_std_error,
        "side": s.side,
        "level": level,
        "payoff": cfg.payoff.name,
        "N": cfg.solver.n_paths,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
        "basis": basis_json(&b.basis, cfg.model.d),
    })))
}

fn cmd_bsde(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let b = build(cfg)?;
    let driver = driver_from(cfg)?;
    let terminal = payoff_process(cfg)?;
    let ens = base_ensemble(cfg, &b)?;
    let sol = solve_bsde(&b.sigma, &driver, &terminal, &ens, &b.basis)?;
    if let Some(dir) = csv_dir {
        let text = bsde_csv(&sol, b.grid, cfg.model.d, cfg.output.write_paths);
        files.push(write_text(dir, "solution.csv", &text)?);
    }
    Ok(obj(json!({
        "Y0": sol.y0,
        "estimate": sol.y0,
        "std_error": sol.y0_std_error,
        "driver": cfg.driver.name,
        "payoff": cfg.payoff.name,
        "N": cfg.solver.n_paths,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
        "basis": basis_json(&b.basis, cfg.model.d),
    })))
}

fn cmd_snell(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let s = cfg.snell.as_ref().expect("materialized");
    let level = s.level.expect("materialized");
    let horizon_steps = s.horizon_steps.expect("materialized");
    let b = build(cfg)?;
    let obstacle = payoff_process(cfg)?;
    let ens = base_ensemble(cfg, &b)?;
    let horizon = StoppingRule::fixed(horizon_steps, ens.n_paths());
    let sol = snell_envelope(&b.sigma, &obstacle, level, &horizon, &ens, &b.basis)?;
    let rule = optimal_stopping_rule(&sol, cfg.solver.contact_tol);
    let stopped = rule.eval_process(&obstacle, &ens);
    let at_rule =
        nonlinear_expectation_at(&b.sigma, &stopped, &rule, level, Side::Upper, &ens, &b.basis)?;
    if let Some(dir) = csv_dir {
        let text = snell_csv(&sol, b.grid, &rule, cfg.output.write_paths);
        files.push(write_text(dir, "solution.csv", &text)?);
    }
    let mut body = obj(json!({
        "V0": sol.v0,
        "estimate": sol.v0,
        "std_error": sol.v0_std_error,
        "mean_tau": rule.mean_time(b.grid),
        "stopped_value": at_rule.value,
        "stopped_std_error": at_rule.std_error,
        "level": level,
        "horizon_steps": horizon_steps,
        "obstacle": cfg.payoff.name,
        "N": cfg.solver.n_paths,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
        "contact_tol": cfg.solver.contact_tol,
    }));
    if let Some(depth) = s.tree_depth {
        let tree = brute_force_snell_tree(&obstacle, level, depth, b.grid.horizon())?;
        body.insert(
            "tree".into(),
            json!({
                "depth": depth,
                "value": tree.value,
                "enumerated": tree.enumerated,
                "difference": (sol.v0 - tree.value).abs(),
            }),
        );
    }
    Ok(body)
}

fn cmd_viscosity(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let s = cfg.viscosity.as_ref().expect("materialized");
    let level = s.level.expect("materialized");
    let point_seed = s.point_seed.expect("materialized");
    let paths_per_point = s.paths_per_point.expect("materialized");
    let b = build(cfg)?;
    let candidate = make_process("viscosity.candidate", &s.candidate, &s.candidate_params)?;
    let points = sample_points(&b.sigma, b.grid, s.points, point_seed)?;

    let mut all_checks: Vec<CheckResult> = Vec::new();
    let mut modes = Vec::new();
    for name in &s.modes {
        let mode = parse_mode(name).expect("validated");
        let report = martingale_property_test(
            &candidate,
            &b.sigma,
            level,
            mode,
            &points,
            &s.rules,
            paths_per_point,
            cfg.solver.seed,
            &b.basis,
        )?;
        modes.push(json!({
            "mode": name,
            "verdict": report.verdict.label(),
            "passed": report.passed(),
            "checks": report.checks.len(),
        }));
        all_checks.extend(report.checks);
    }
    let combined = ViscosityReport::from_checks(all_checks, points.len());
    if let Some(dir) = csv_dir {
        files.push(write_text(dir, "report.csv", &report_csv(&combined)?)?);
    }
    let worst = combined.worst().map(|c| {
        json!({
            "name": c.name,
            "margin": c.margin,
            "std_error": c.std_error,
            "verdict": c.verdict.label(),
        })
    });
    Ok(obj(json!({
        "passed": combined.passed(),
        "verdict": combined.verdict.label(),
        "checks": combined.checks.len(),
        "points": points.len(),
        "rules": s.rules,
        "level": level,
        "candidate": s.candidate,
        "modes": modes,
        "worst": worst,
        "N": paths_per_point,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
    })))
}

fn candidate_from(cfg: &ExperimentConfig, c: &CandidateSection, field: &str) -> Result<Candidate> {
    let name_field = format!("{field}.name");
    let process = make_process(&name_field, &c.name, &c.params)?;
    match c.kind.as_str() {
        "terminal" => Ok(Candidate::Terminal {
            payoff: process,
            driver: driver_from(cfg)?,
        }),
        _ => Ok(Candidate::Process(process)),
    }
}

fn cmd_compare(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let s = cfg.compare.as_ref().expect("validated");
    let b = build(cfg)?;
    let u = candidate_from(cfg, &s.u, "compare.u")?;
    let v = candidate_from(cfg, &s.v, "compare.v")?;
    let mut plan = ComparisonPlan::new(s.sample_paths);
    plan.difference_window = s.difference_window;
    plan.level = s.level.expect("materialized");
    plan.jet_paths = s.jet_paths;
    let report = comparison_experiment(
        &u,
        &v,
        &b.sigma,
        b.grid,
        &plan,
        cfg.solver.n_paths,
        cfg.solver.seed,
        &b.basis,
    )?;
    if let Some(dir) = csv_dir {
        files.push(write_text(dir, "report.csv", &report_csv(&report.report)?)?);
    }
    Ok(obj(json!({
        "passed": report.report.passed(),
        "verdict": report.report.verdict.label(),
        "min_margin": report.min_margin,
        "min_margin_std_error": report.min_margin_std_error,
        "witness_path": report.witness_path,
        "witness_index": report.witness_index,
        "difference": report.difference,
        "u": s.u.name,
        "v": s.v.name,
        "sample_paths": s.sample_paths,
        "N": cfg.solver.n_paths,
        "n": cfg.grid.n,
        "seed": cfg.solver.seed,
    })))
}

fn cmd_converge(
    cfg: &ExperimentConfig,
    csv_dir: Option<&Path>,
    files: &mut Vec<PathBuf>,
) -> Result<Map<String, Value>> {
    let s = cfg.converge.as_ref().expect("validated").clone();
    let inner = match s.experiment.as_str() {
        "bsde" => CommandKind::Bsde,
        "snell" => CommandKind::Snell,
        _ => CommandKind::Expectation,
    };
    let mut rows = Vec::new();
    let mut csv = String::from("id,estimate,std_error,N,n,seed");
    if s.target.is_some() {
        csv.push_str(",abs_error");
    }
    csv.push_str(",runtime_ms\n");
    for level in &s.levels {
        let mut sub = cfg.clone();
        sub.converge = None;
        sub.grid.n = level.n;
        sub.solver.n_paths = level.n_paths;
        sub.materialize(inner);
        sub.validate(inner)?;
        let started = Instant::now();
        let mut sink = Vec::new();
        let body = dispatch(inner, &sub, None, &mut sink)?;
        let runtime_ms = started.elapsed().as_millis() as u64;
        let estimate = body
            .get("estimate")
            .and_then(Value::as_f64)
            .expect("runners emit an estimate");
        let std_error = body
            .get("std_error")
            .and_then(Value::as_f64)
            .expect("runners emit a standard error");
        let id = format!("{}-N{}-n{}", s.experiment, level.n_paths, level.n);
        let abs_error = s.target.map(|t| (estimate - t).abs());
        csv.push_str(&format!(
            "{id},{estimate},{std_error},{},{},{}",
            level.n_paths, level.n, sub.solver.seed
        ));
        if let Some(e) = abs_error {
            csv.push_str(&format!(",{e}"));
        }
        csv.push_str(&format!(",{runtime_ms}\n"));
        rows.push(json!({
            "id": id,
            "estimate": estimate,
            "std_error": std_error,
            "N": level.n_paths,
            "n": level.n,
            "seed": sub.solver.seed,
            "abs_error": abs_error,
            "runtime_ms": runtime_ms,
        }));
    }
    if let Some(dir) = csv_dir {
        files.push(write_text(dir, "table.csv", &csv)?);
    }
    Ok(obj(json!({
        "experiment": s.experiment,
        "levels": s.levels.len(),
        "target": s.target,
        "rows": rows,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::ExperimentConfig;

    fn small_config(dir: &Path, extra: &str) -> ExperimentConfig {
        let text = format!(
            "[grid]\nT = 1.0\nn = 10\n[solver]\nN = 2000\nseed = 7\ndegree = 2\n\
             [output]\ndir = \"{}\"\n{extra}",
            dir.display()
        );
        ExperimentConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn heat_equation_summary_close_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[driver]\nname = \"zero\"\n[payoff]\nname = \"square\"\n",
        );
        let arts = run(CommandKind::Bsde, cfg).unwrap();
        let y0 = arts.summary["Y0"].as_f64().unwrap();
        assert!((y0 - 1.0).abs() < 0.05, "Y0 = {y0}");
        assert!(arts.out_dir.join("summary.json").is_file());
        assert!(arts.out_dir.join("resolved.toml").is_file());
        assert!(arts.out_dir.join("solution.csv").is_file());
        // The embedded config is fully resolved: defaults are explicit.
        let cfg_json = &arts.summary["config"];
        assert_eq!(cfg_json["solver"]["degree"], json!(2));
        assert_eq!(cfg_json["model"]["L"], json!(0.5));
    }

    #[test]
    fn degenerate_diffusion_is_exact_with_zero_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[model]\nsigma = \"constant\"\nsigma_params = { scale = 0.0 }\n\
             [payoff]\nname = \"linear\"\n",
        );
        let arts = run(CommandKind::Simulate, cfg).unwrap();
        assert_eq!(arts.summary["estimate"].as_f64().unwrap(), 0.0);
        assert_eq!(arts.summary["std_error"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn expectation_at_level_half_near_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), "[payoff]\nname = \"linear\"\n[expectation]\n");
        let arts = run(CommandKind::Expectation, cfg).unwrap();
        let est = arts.summary["estimate"].as_f64().unwrap();
        assert!((est - 0.5).abs() < 0.1, "estimate = {est}");
        let level = arts.summary["config"]["expectation"]["level"]
            .as_f64()
            .unwrap();
        assert_eq!(level, 0.5);
    }

    #[test]
    fn snell_summary_reports_rule_and_reevaluation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[payoff]\nname = \"linear\"\n[snell]\ntree_depth = 3\n",
        );
        let arts = run(CommandKind::Snell, cfg).unwrap();
        let v0 = arts.summary["V0"].as_f64().unwrap();
        let stopped = arts.summary["stopped_value"].as_f64().unwrap();
        let se = arts.summary["std_error"].as_f64().unwrap();
        assert!((v0 - stopped).abs() <= 5.0 * se.max(0.02), "v0={v0} stopped={stopped}");
        assert!(arts.summary["mean_tau"].as_f64().unwrap() <= 1.0);
        assert!(arts.summary["tree"]["value"].as_f64().is_some());
        assert!(arts.out_dir.join("solution.csv").is_file());
    }

    #[test]
    fn viscosity_command_merges_modes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[viscosity]\ncandidate = \"heat-square\"\npoints = 3\nrules = [2, 4]\n\
             paths_per_point = 4000\n",
        );
        let arts = run(CommandKind::ViscosityCheck, cfg).unwrap();
        assert_eq!(arts.summary["passed"], json!(true));
        assert_eq!(arts.summary["checks"], json!(2 * 3 * 2));
        assert!(arts.out_dir.join("report.csv").is_file());
    }

    #[test]
    fn compare_command_orders_shifted_pair() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[compare]\nsample_paths = 5\n\
             u = { kind = \"process\", name = \"sine\" }\n\
             v = { kind = \"process\", name = \"sine\", params = { shift = 0.5 } }\n",
        );
        let arts = run(CommandKind::Compare, cfg).unwrap();
        assert_eq!(arts.summary["passed"], json!(true));
        // `sin(x) + 0.5` is recomputed per point, so the margin matches the
        // shift only up to one rounding of the re-associated sum.
        let margin = arts.summary["min_margin"].as_f64().unwrap();
        assert!((margin - 0.5).abs() < 1e-12, "margin = {margin}");
    }

    #[test]
    fn converge_appends_error_column_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(
            dir.path(),
            "[payoff]\nname = \"linear\"\n[converge]\nexperiment = \"expectation\"\n\
             target = 0.5\nlevels = [{ N = 1000, n = 5 }, { N = 2000, n = 10 }]\n",
        );
        let arts = run(CommandKind::Converge, cfg).unwrap();
        let rows = arts.summary["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert!(row["abs_error"].as_f64().unwrap() < 0.2);
        }
        let table = std::fs::read_to_string(arts.out_dir.join("table.csv")).unwrap();
        let header = table.lines().next().unwrap();
        assert_eq!(header, "id,estimate,std_error,N,n,seed,abs_error,runtime_ms");
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn reruns_are_bit_identical_except_runtime() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let run_one = |dir: &Path| {
            let cfg = small_config(dir, "[payoff]\nname = \"sine\"\n[expectation]\n");
            run(CommandKind::Expectation, cfg).unwrap()
        };
        let a = run_one(dir1.path());
        let b = run_one(dir2.path());
        let mut sa = a.summary.clone();
        let mut sb = b.summary.clone();
        sa.as_object_mut().unwrap().remove("runtime_ms");
        sb.as_object_mut().unwrap().remove("runtime_ms");
        // Output directories differ by construction; mask them too.
        sa["config"]["output"]
            .as_object_mut()
            .unwrap()
            .remove("dir");
        sb["config"]["output"]
            .as_object_mut()
            .unwrap()
            .remove("dir");
        assert_eq!(sa, sb);
        let csv_a = std::fs::read_to_string(a.out_dir.join("solution.csv")).unwrap();
        let csv_b = std::fs::read_to_string(b.out_dir.join("solution.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn rerunning_the_resolved_config_reproduces_outputs() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = small_config(dir1.path(), "[payoff]\nname = \"abs\"\n[expectation]\n");
        let first = run(CommandKind::Expectation, cfg).unwrap();
        let mut resolved =
            ExperimentConfig::from_path(&first.out_dir.join("resolved.toml")).unwrap();
        resolved.output.dir = dir2.path().display().to_string();
        let second = run(CommandKind::Expectation, resolved).unwrap();
        assert_eq!(
            first.summary["estimate"].as_f64().unwrap().to_bits(),
            second.summary["estimate"].as_f64().unwrap().to_bits()
        );
        assert_eq!(
            std::fs::read_to_string(first.out_dir.join("solution.csv")).unwrap(),
            std::fs::read_to_string(second.out_dir.join("solution.csv")).unwrap()
        );
    }
}
