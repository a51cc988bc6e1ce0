use std::path::Path;
use std::process::{Command, Output};

use sgrg::covariance::continuum_at_zero_closed_form;

fn sgrg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgrg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SGRG_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn covariance_at_origin_is_closed_form_plus_small_correction() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["covariance", "--L", "2", "--M", "4", "--sigma", "0", "--x", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(dir.path());
    let value = m["summary"]["value"].as_f64().unwrap();
    let correction = m["summary"]["periodization_correction"].as_f64().unwrap();
    let closed = continuum_at_zero_closed_form(2, 0.0);
    assert!((value - (closed + correction)).abs() <= 1e-6);
    assert!(correction.abs() < 1e-2, "correction {correction}");
    let table = std::fs::read_to_string(dir.path().join("covariance.csv")).unwrap();
    assert!(table.starts_with("x0,x1,alpha,value,tail_bound"));
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn identity_suites_pass_on_three_by_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["identities", "--seed", "42", "--torus", "3x3"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let passed = stdout(&o).lines().filter(|l| l.starts_with("PASS")).count();
    assert!(passed >= 6, "{}", stdout(&o));
    assert_eq!(manifest(dir.path())["config"]["seed"], 42);
}

#[test]
fn uv_flow_writes_one_row_per_scale_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["flow-uv", "--beta", "12.566", "--L", "2", "--N", "8", "--zeta", "0.01"];
    let oa = sgrg(a.path(), &args);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    let ob = sgrg(b.path(), &args);
    assert_eq!(ob.status.code(), Some(0), "{}", stderr(&ob));
    let traj = std::fs::read(a.path().join("trajectory.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&traj).lines().count(), 1 + 9);
    for name in ["trajectory.csv", "contraction.csv", "plot_contraction.csv", "plot_zeta-schedule.csv"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let m = manifest(a.path());
    assert_eq!(m["config"]["beta"], 12.566);
    assert_eq!(m["config"]["n"], 8);
    assert!(m["config"]["truncation"]["grid"].is_number());
}

#[test]
fn plotdata_rejects_unknown_kind_and_lists_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["flow-uv", "--beta", "12.566", "--N", "2", "--zeta", "0.01"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj = dir.path().join("trajectory.json");
    let plots = dir.path().join("plots");
    let o = sgrg(&plots, &["plotdata", "--trajectory", traj.to_str().unwrap(), "--kind", "zeta-schedule"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(plots.join("plot_zeta-schedule.csv")).unwrap();
    assert!(csv.starts_with("j,log_abs_zeta,reference"));
    let o = sgrg(&plots, &["plotdata", "--trajectory", traj.to_str().unwrap(), "--kind", "histogram"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("contraction") && stderr(&o).contains("zeta-schedule"), "{}", stderr(&o));
}

#[test]
fn oracle_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["oracle", "--beta", "37.7", "--zeta", "0.05"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn oracle_is_reproducible_and_writes_snapshots() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["oracle", "--seed", "7", "--beta", "37.7", "--zeta", "0.05", "--samples", "2000", "--snapshots", "2"];
    let oa = sgrg(a.path(), &args);
    assert_eq!(oa.status.code(), Some(0), "{}{}", stdout(&oa), stderr(&oa));
    sgrg(b.path(), &args);
    assert_eq!(std::fs::read(a.path().join("oracle.csv")).unwrap(), std::fs::read(b.path().join("oracle.csv")).unwrap());
    let mut f = std::fs::File::open(a.path().join("field_0001.bin")).unwrap();
    let (grid, seed) = sgrg::fields::FieldGrid::read_snapshot(&mut f).unwrap();
    assert_eq!(seed, Some(7));
    assert_eq!(grid.values.len(), 8 * 8);
}

#[test]
fn oversized_oracle_torus_is_a_resource_cap() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["oracle", "--seed", "1", "--beta", "37.7", "--zeta", "0.05", "--M", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn ir_below_the_transition_warns_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgrg(dir.path(), &["flow-ir", "--beta", "20", "--L", "2", "--M", "1", "--zeta", "0.001"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert_eq!(manifest(dir.path())["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_unknown_key_is_a_usage_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"beta": 37.7, "L": 8, "M": 3, "zeta": 0.01, "temperature": 2}"#).unwrap();
    let o = sgrg(dir.path(), &["flow-ir", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("temperature"), "{}", stderr(&o));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_sgrg"))
        .args(["covariance", "--kind", "continuum", "--x", "0.5,0.5", "--order", "1"])
        .env("SGRG_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(target.join("covariance.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
}
