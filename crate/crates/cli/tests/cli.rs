use std::path::Path;
use std::process::{Command, Output};

use mvpdmp_cli::report::{PolicyReport, SimulationReport, ValueReport};

fn mvpdmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvpdmp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.json", r#"{"sead": 1}"#);
    let invalid = write_config(dir.path(), "b.json", r#"{"mc_samples": 1}"#);
    for args in [
        vec!["value", "--config", unknown.as_str()],
        vec!["policy-eval", "--config", invalid.as_str()],
        vec!["value", "--nbpt", "1"],
        vec!["compare", "--config", "/nonexistent/config.json"],
    ] {
        let out = mvpdmp(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn simulate_writes_one_jump_from_a_single_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvpdmp(&["simulate", "--out", dir.path().to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success());
    let report: SimulationReport = read(&dir.path().join("simulate.json"));
    assert_eq!(report.provenance.seed, 3);
    assert_eq!(report.paths.len(), 1);
    assert_eq!(report.paths[0].trajectory.jumps.len(), 1);
    let csv = std::fs::read_to_string(dir.path().join("trajectory_0000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn frozen_model_records_no_jumps() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "frozen.json",
        r#"{"model": "no_jump", "reward": {"constant": 1.0}, "simulate": {"horizon": 5.0}, "paths": 2}"#,
    );
    let out = mvpdmp(&["simulate", "--config", &config, "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: SimulationReport = read(&dir.path().join("simulate.json"));
    assert!(report.paths.iter().all(|p| p.trajectory.jumps.is_empty()));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = mvpdmp(&["value", "--nbpt", "50", "--horizon", "2", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for name in ["value.json", "value.txt", "compromise_curve.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn value_at_zero_jumps_is_the_reward() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvpdmp(&["value", "--horizon", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let report: ValueReport = read(&dir.path().join("value.json"));
    // one cell of size 3, capped at γ = 1, clock 0
    assert_eq!(report.record.value, 1.0);
    assert!(!dir.path().join("compromise_curve.csv").exists());
}

#[test]
fn value_grows_with_the_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let mut values = Vec::new();
    for n in ["1", "2"] {
        let d = dir.path().join(n);
        let out = mvpdmp(&["value", "--horizon", n, "--nbpt", "10", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
        values.push(read::<ValueReport>(&d.join("value.json")).record.value);
    }
    assert!(values[1] >= values[0] - 1e-9, "{values:?}");
}

#[test]
fn constant_reward_policy_has_no_spread() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "const.json",
        r#"{"model": "population", "reward": {"constant": 0.7}, "mc_samples": 500, "solver": {"nbpt": 20}}"#,
    );
    let out = mvpdmp(&["policy-eval", "--config", &config, "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: PolicyReport = read(&dir.path().join("policy_eval.json"));
    assert_eq!(report.estimate.mean, 0.7);
    assert_eq!(report.estimate.stderr, 0.0);
    assert!(report.sandwich.holds);
}

#[test]
fn json_flag_prints_the_report() {
    let out = mvpdmp(&["value", "--horizon", "1", "--nbpt", "20", "--json"]);
    assert!(out.status.success());
    let report: ValueReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.provenance.command, "value");
    assert_eq!(report.provenance.config.solver.nbpt, 20);
    let table = mvpdmp(&["value", "--horizon", "1", "--nbpt", "20"]);
    assert!(String::from_utf8(table.stdout).unwrap().starts_with("quantity"));
}
