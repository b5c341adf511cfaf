//! End-to-end checks of the `portal` binary: artifacts, exit codes, and the
//! scenario export and budget report round trip.

use std::fs;
use std::path::Path;
use std::process::Command;

use portal_core::env::{variation_budgets, ScenarioSequence};
use portal_core::harness::{instantiate, ExperimentConfig};

const SMALL: &str = r#"
version = 1
seeds = [3]
variants = [{ kind = "portal", window = 5, restart = 4 }, { kind = "ada-portal" }]

[scenario]
drift = "abrupt-switch"
rounds = 24
n_states = 4
n_actions = 2
horizon = 3
dim = 2
n_phi = 3
n_mu = 3
switch_every = 8
reward_switch = "mirror"
"#;

fn portal() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_portal"));
    cmd.env_remove("PORTAL_OUT_DIR").env("RUST_LOG", "warn");
    cmd
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_one_csv_per_cell_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let status = portal().arg("run").arg(&config).arg("--out-dir").arg(&out).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["ada-portal_seed3.csv", "portal-W5-tau4_seed3.csv", "summary.csv"]);

    let run = fs::read_to_string(out.join("portal-W5-tau4_seed3.csv")).unwrap();
    assert!(run.starts_with("round,gap,V_star,V_pi,max_TV_err,restart_flag,W,tau,seed"));
    assert_eq!(run.lines().count(), 1 + 24);
    let ada = fs::read_to_string(out.join("ada-portal_seed3.csv")).unwrap();
    assert!(ada.lines().next().unwrap().ends_with("block,arm_W,arm_tau,R_i,u_entropy"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn out_dir_from_environment_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("env-out");
    let status = portal()
        .env("PORTAL_OUT_DIR", &out)
        .args(["run", "--seed", "11"])
        .arg(&config)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert!(out.join("portal-W5-tau4_seed11.csv").exists());
    assert!(!out.join("portal-W5-tau4_seed3.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = portal().arg("run").arg(dir.path().join("absent.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let bad = write_config(dir.path(), &SMALL.replace("rounds = 24", "rounds = 0"));
    let out = portal().arg("run").arg(&bad).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));

    let unknown = write_config(dir.path(), &SMALL.replace("version = 1", "version = 1\ncolour = \"red\""));
    let out = portal().arg("run").arg(&unknown).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exported_scenario_reports_the_same_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let file = dir.path().join("scenario.json");
    let status = portal().args(["export-scenario", "--seed", "5"]).arg(&config).arg(&file).output().unwrap().status;
    assert_eq!(status.code(), Some(0));

    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let (_, direct) = instantiate(&cfg.scenario, 5).unwrap();
    let loaded = ScenarioSequence::load(&file).unwrap();
    assert_eq!(variation_budgets(&loaded), variation_budgets(&direct));

    let out = portal().arg("budgets").arg(&file).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let delta_p = format!("{:.6}", variation_budgets(&direct).delta_p);
    assert!(text.lines().any(|l| l.starts_with("delta_p ") && l.ends_with(&delta_p)), "{text}");

    let missing = portal().arg("budgets").arg(dir.path().join("none.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn oracles_exit_status_reflects_the_checks() {
    let tabular_only = portal().args(["oracles", "20", "--sequences", "0"]).output().unwrap();
    assert_eq!(tabular_only.status.code(), Some(0));
    let text = String::from_utf8(tabular_only.stdout).unwrap();
    assert!(text.contains("simulation identity"));
    assert!(text.contains("bounded difference"));
}
