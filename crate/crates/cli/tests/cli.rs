use std::process::{Command, Output};

use ladderwalk_core::{EnvSpec, Environment, SiteLaw};
use serde_json::Value;

const ROW1: &str = "0.08,0.36,0.21,0.35";

fn ladderwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladderwalk"))
        .args(args)
        .env_remove("LADDERWALK_WORKERS")
        .output()
        .unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = ladderwalk(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&stdout(args)).unwrap()
}

#[test]
fn version_and_usage_exit_codes() {
    let v = ladderwalk(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));

    let bad = ladderwalk(&["t1", "--law", ROW1, "--frobnicate"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert!(bad.stdout.is_empty());
}

#[test]
fn bad_input_is_a_usage_error() {
    let cases: [&[&str]; 5] = [
        &["t1", "--law", "0.5,0.5,0.5,0.5"],
        &["t1", "--law", "0.5,0.5"],
        &["t1", "--env", "/nonexistent/env.json"],
        &["t1", "--law", ROW1, "--env", "x.json"],
        &["exit", "--law", ROW1, "--a", "0", "--b", "1"],
    ];
    for args in cases {
        assert_eq!(ladderwalk(args).status.code(), Some(2), "{args:?}");
    }
    let out = ladderwalk(&["t1", "--law", ROW1, "--tol", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_computation_exits_one() {
    let out = ladderwalk(&["t1", "--law", "0.25,0.25,0.25,0.25"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn environment_file_matches_inline_law() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("env.json");
    let spec = Environment::homogeneous(SiteLaw::new(0.08, 0.36, 0.21, 0.35).unwrap())
        .to_spec()
        .unwrap();
    std::fs::write(&path, spec.to_json()).unwrap();
    assert_eq!(
        EnvSpec::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap(),
        spec
    );
    let file = path.to_str().unwrap();
    for cmd in [
        vec!["t1"],
        vec!["simulate", "--replicas", "500", "--seed", "3"],
        vec!["exit", "--a", "-5", "--b", "1"],
    ] {
        let mut a = cmd.clone();
        a.extend(["--env", file]);
        let mut b = cmd.clone();
        b.extend(["--law", ROW1]);
        assert_eq!(stdout(&a), stdout(&b), "{cmd:?}");
    }
}

#[test]
fn seeded_commands_repeat_exactly() {
    let args = [
        "decompose",
        "--law",
        ROW1,
        "--replicas",
        "2000",
        "--seed",
        "17",
    ];
    let first = stdout(&args);
    assert_eq!(stdout(&args), first);
    assert!(first.starts_with("level,"));
    let mut workers = args.to_vec();
    workers.extend(["--workers", "3"]);
    assert_eq!(stdout(&workers), first);
}

#[test]
fn exit_probabilities_of_row_one() {
    let text = stdout(&[
        "exit", "--law", ROW1, "--a", "-200", "--b", "1", "--start", "0", "--json",
    ]);
    let rows: Value = serde_json::from_str(&text).unwrap();
    let to_one = rows
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["target"] == 1)
        .unwrap();
    assert!((to_one["probability"].as_f64().unwrap() - 0.532272308).abs() < 1e-9);
}

#[test]
fn wald_table_writes_its_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wald.csv");
    let printed = stdout(&["wald-table", "--output", path.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), printed);
    assert_eq!(printed.lines().count(), 6);
    assert!(printed.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn json_documents() {
    let m = json(&["mean-matrix", "--law", ROW1]);
    assert_eq!(m["rows"].as_array().unwrap().len(), 9);
    let v = json(&["velocity", "--law", ROW1, "--samples", "1"]);
    assert!((v["v_p"].as_f64().unwrap() - 0.39).abs() < 1e-8);
    for variant in ["drift", "abs", "ladder"] {
        assert!(v[variant]["value"].is_number(), "{variant}");
    }
    let abs = json(&[
        "velocity",
        "--law",
        ROW1,
        "--samples",
        "1",
        "--factor",
        "abs",
    ]);
    assert!((abs["v_p"].as_f64().unwrap() - 1.43).abs() < 1e-8);
}

#[test]
fn dumped_paths_are_stopped_walks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("paths.txt");
    stdout(&[
        "simulate",
        "--law",
        ROW1,
        "--replicas",
        "50",
        "--seed",
        "1",
        "--dump-paths",
        path.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let xs: Vec<i64> = line.split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(xs[0], 0);
        assert!(*xs.last().unwrap() > 0);
    }
}
