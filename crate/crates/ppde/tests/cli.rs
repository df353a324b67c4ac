//! End-to-end checks of the `ppde` binary: exit codes, the machine-readable
//! error report, artifact layout, global flag overrides, and reproducibility
//! from an emitted resolved config. Scales are kept tiny; statistical
//! accuracy is covered by the acceptance suite.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_ppde")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(exe())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary launches")
}

fn write_config(dir: &Path, body: &str) {
    std::fs::write(dir.join("exp.toml"), body).unwrap();
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON summary")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error report")
}

const TINY_BSDE: &str = "[grid]\nn = 10\n\n[payoff]\nname = \"square\"\n\n\
                         [solver]\nN = 2000\ndegree = 2\n";

#[test]
fn success_emits_summary_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY_BSDE);
    let out = run_in(dir.path(), &["bsde", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = stdout_json(&out);
    assert_eq!(summary["command"], "bsde");
    assert!(summary["Y0"].is_f64());
    assert!(summary["runtime_ms"].is_u64());
    // The embedded config is fully resolved: defaults the input file never
    // mentioned are spelled out.
    assert_eq!(summary["config"]["solver"]["seed"], 42);
    assert_eq!(summary["config"]["driver"]["name"], "zero");
    assert_eq!(summary["config"]["grid"]["T"], 1.0);

    for name in ["resolved.toml", "summary.json", "solution.csv"] {
        assert!(dir.path().join("out").join(name).is_file(), "missing {name}");
    }
    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(on_disk, summary);
}

#[test]
fn validation_failure_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "[grid]\nn = 0\n");
    let out = run_in(dir.path(), &["simulate", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let report = stderr_json(&out);
    assert_eq!(report["exit_code"], 2);
    let message = report["error"].as_str().unwrap();
    assert!(message.contains("grid.n"), "field not named: {message}");
}

#[test]
fn unknown_payoff_exits_2_and_lists_choices() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "[payoff]\nname = \"mystery\"\n");
    let out = run_in(dir.path(), &["simulate", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let message = stderr_json(&out)["error"].as_str().unwrap().to_string();
    assert!(message.contains("payoff.name") && message.contains("available"), "{message}");
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["simulate", "--config", "nowhere.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_blowup_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // A linear generator with an astronomically large coefficient overflows
    // the backward recursion to infinity within a few steps.
    write_config(
        dir.path(),
        "[grid]\nn = 10\n\n[driver]\nname = \"linear\"\n[driver.params]\na = 1e300\n\n\
         [payoff]\nname = \"square\"\n\n[solver]\nN = 1000\ndegree = 2\n",
    );
    let out = run_in(dir.path(), &["bsde", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["exit_code"], 3);
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY_BSDE);
    let a = stdout_json(&run_in(
        dir.path(),
        &["bsde", "--config", "exp.toml", "--out", "alt", "--seed", "7"],
    ));
    assert_eq!(a["config"]["solver"]["seed"], 7);
    assert_eq!(a["config"]["output"]["dir"], "alt");
    assert!(dir.path().join("alt/summary.json").is_file());
    assert!(!dir.path().join("out").exists());

    let b = stdout_json(&run_in(
        dir.path(),
        &["bsde", "--config", "exp.toml", "--out", "alt2", "--seed", "8"],
    ));
    assert_ne!(a["Y0"], b["Y0"], "different seeds must move the estimate");
}

#[test]
fn rerunning_the_emitted_resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "[grid]\nn = 15\n\n[model]\nL = 0.4\n\n[payoff]\nname = \"sine\"\n\n\
         [solver]\nN = 3000\n\n[expectation]\nside = \"upper\"\n",
    );
    let first = stdout_json(&run_in(dir.path(), &["expectation", "--config", "exp.toml"]));

    let second = stdout_json(&run_in(
        dir.path(),
        &["expectation", "--config", "out/resolved.toml", "--out", "rerun"],
    ));
    assert_eq!(first["estimate"], second["estimate"]);
    assert_eq!(first["std_error"], second["std_error"]);

    let csv_a = std::fs::read(dir.path().join("out/solution.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("rerun/solution.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "solution tables must be bit-identical");
}

#[test]
fn defaults_run_without_any_config_file() {
    let dir = tempfile::tempdir().unwrap();
    // Built-in defaults are a complete experiment; only shrink the scale.
    let out = run_in(
        dir.path(),
        &["simulate", "--seed", "3", "--out", "d"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["command"], "simulate");
    assert_eq!(summary["config"]["solver"]["seed"], 3);
    assert!(dir.path().join("d/resolved.toml").is_file());
}
