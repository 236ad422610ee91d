use std::path::{Path, PathBuf};
use std::process::Command;

fn beamlab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_beamlab")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn validate_echoes_config_and_integer_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let (code, stdout) = beamlab(&["validate", "--out", out, "--h-list", "0.05,0.025"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("N₀ = 1"));
    let dir = &run_dirs(tmp.path())[0];
    let echoed = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(echoed.contains("schema_version = 1"));
    assert!(echoed.contains("0.025"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("validation.json")).unwrap()).unwrap();
    assert!(v["lambda_beta"].as_f64().unwrap() < v["two_rho"].as_f64().unwrap());
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[params]\nbeta = 1.2\n").unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(beamlab(&["validate", "--config", bad.to_str().unwrap(), "--out", out]).0, 1);
    assert_eq!(beamlab(&["validate", "--config", "/nonexistent.toml", "--out", out]).0, 1);
    std::fs::write(&bad, "schema_version = 9\n").unwrap();
    assert_eq!(beamlab(&["validate", "--config", bad.to_str().unwrap(), "--out", out]).0, 1);
}

#[test]
fn flow_csv_is_reproducible_and_report_reads_it() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(beamlab(&["flow", "--out", a.to_str().unwrap(), "--seed", "3"]).0, 0);
    assert_eq!(beamlab(&["flow", "--out", b.to_str().unwrap(), "--seed", "3", "--threads", "1"]).0, 0);
    let da = &run_dirs(&a)[0];
    let db = &run_dirs(&b)[0];
    let ca = std::fs::read(da.join("gamma.csv")).unwrap();
    assert_eq!(ca, std::fs::read(db.join("gamma.csv")).unwrap());
    assert!(String::from_utf8_lossy(&ca).starts_with("t,r,theta,xi_r,xi_theta,p"));
    let (code, stdout) = beamlab(&["report", da.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("energy_drift"));
}
