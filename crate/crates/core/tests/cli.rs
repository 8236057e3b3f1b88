use std::path::Path;
use std::process::Command;

use toposync::runner::RunManifest;

const BIN: &str = env!("CARGO_BIN_EXE_toposync");

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn chain(initial: &str) -> String {
    format!(
        r#"{{
        "lattice": {{"kind": "ssh", "n_sites": 6, "lambda0": 0.25, "dimerization": 0.6}},
        "initial": {initial},
        "time": {{"t_end": 40.0, "dt_out": 0.5, "window": [20.0, 40.0]}},
        "sweep": {{"axis": "dimerization", "values": [0.4, 0.6]}}
    }}"#
    )
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn validate_prints_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &chain(r#"{"kind": "random"}"#));
    let out = Command::new(BIN).args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_jobs"], 2);
}

#[test]
fn unknown_keys_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &chain(r#"{"kind": "random"}"#).replace("\"initial\"", "\"inital\""));
    for sub in ["validate", "meanfield"] {
        let status = Command::new(BIN).args([sub, "--config"]).arg(&cfg).status().unwrap();
        assert_eq!(status.code(), Some(1), "{sub}");
    }
}

#[test]
fn meanfield_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &chain(r#"{"kind": "random"}"#));
    let out = dir.path().join("out");
    let status = Command::new(BIN)
        .args(["meanfield", "--jobs", "1", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let m = manifest(&out);
    assert_eq!(m.master_seed, 9);
    assert_eq!(m.jobs.len(), 2);
    for job in &m.jobs {
        for a in &job.artifacts {
            assert!(out.join(a).is_file(), "{a}");
        }
    }
}

#[test]
fn failed_jobs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &chain(r#"{"kind": "eigenstate", "index": 9}"#));
    let out = dir.path().join("out");
    let status = Command::new(BIN)
        .args(["meanfield", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert_eq!(manifest(&out).failed_jobs(), 2);
}

#[test]
fn realizations_flag_overrides_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &chain(r#"{"kind": "random"}"#));
    let out = dir.path().join("out");
    let status = Command::new(BIN)
        .args(["meanfield", "--realizations", "3", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(manifest(&out).jobs.len(), 6);
}
