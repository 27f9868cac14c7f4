//! End-to-end runs of the `bsipde` binary: exit codes, table schemas and
//! replay from a manifest.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bsipde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsipde"))
        .args(["--out-dir", dir.to_str().unwrap(), "--quiet"])
        .args(args)
        .output()
        .unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    v.sort();
    v
}

const SMALL: &[&str] = &["--steps", "8", "--paths", "32", "--levels", "2,4,8"];

#[test]
fn catalog_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bsipde(dir.path(), &["catalog"]).status.code(), Some(0));
    assert_eq!(bsipde(dir.path(), &["teleport"]).status.code(), Some(2));
    assert_eq!(bsipde(dir.path(), &["--format", "xml", "catalog"]).status.code(), Some(2));
    assert_eq!(bsipde(dir.path(), &["--problem", "nope", "simulate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"stepz": 4}"#).unwrap();
    let out = bsipde(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn table_schemas() {
    let expect = [
        (vec!["simulate"], "path_id,t,mesh_index,x0,X,X_left"),
        (vec!["invert"], "path_id,t,y,u,method"),
        (vec!["bsde"], "t,Y_mean,Y_se,Z_mean,U_mean"),
        (vec!["compose"], "t,x,p,q,r,path_id"),
    ];
    for (args, cols) in expect {
        let dir = tempfile::tempdir().unwrap();
        let mut all = SMALL.to_vec();
        all.extend(args.iter());
        let out = bsipde(dir.path(), &all);
        assert!(matches!(out.status.code(), Some(0 | 1)), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let files = csv_files(dir.path());
        assert!(files.iter().any(|f| header(f).starts_with(cols)), "{args:?}: {files:?}");
        assert!(dir.path().join("manifest.json").exists());
    }
}

#[test]
fn manifest_replays_to_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = SMALL.to_vec();
    args.extend(["--seed", "11", "simulate"]);
    bsipde(a.path(), &args);
    let manifest = a.path().join("manifest.json");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert!(m["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    bsipde(b.path(), &["--config", manifest.to_str().unwrap(), "simulate"]);
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn json_format_and_wentzell_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsipde(dir.path(), &["--steps", "64", "--paths", "4", "--levels", "16,32,64", "--format", "json", "verify", "wentzell"]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    let reports: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(reports.iter().any(|f| f.ends_with("_report.json")), "{reports:?}");
    assert!(reports.iter().all(|f| !f.ends_with(".csv")));
}
