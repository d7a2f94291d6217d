//! Exit codes and on-disk outputs of the `dilnet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dilnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilnet"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn prepare(out: &Path, n: usize, seed: u64) -> String {
    let o = dilnet(out, &["prepare", "--synthetic", &n.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.json").to_string_lossy().into_owned()
}

fn checksum_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("checksum:")).expect("checksum printed").to_string()
}

#[test]
fn prepare_is_deterministic_and_reports_the_split() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path, seed: &str| dilnet(dir, &["prepare", "--synthetic", "50", "--seed", seed]);
    let (x, y) = (run(a.path(), "7"), run(b.path(), "7"));
    assert_eq!(checksum_line(&x), checksum_line(&y));
    assert!(stdout(&x).contains("train: 40"), "{}", stdout(&x));
    assert!(stdout(&x).contains("test: 10"));
    assert!(a.path().join("run-prepare.json").is_file());
    let z = run(b.path(), "8");
    assert_ne!(checksum_line(&x), checksum_line(&z));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = prepare(dir.path(), 20, 1);
    for args in [
        vec!["prepare"],
        vec!["prepare", "--synthetic", "10", "--data", "x"],
        vec!["train", "--variant", "E", "--manifest", &m],
        vec!["train", "--variant", "A", "--manifest", &m, "--augment", "maybe"],
        vec!["train", "--variant", "A", "--manifest", &m, "--batch-size", "0"],
        vec!["train", "--variant", "A", "--manifest", &m, "--fraction", "1.5"],
        vec!["fuse", "--members", "A", "--manifest", &m],
        vec!["fuse", "--members", "A,A", "--manifest", &m],
        vec!["gradcheck", "--scope", "everything"],
        vec!["gradcheck", "--instances", "0"],
        vec!["frobnicate"],
    ] {
        let o = dilnet(dir.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(code(&dilnet(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = prepare(dir.path(), 20, 1);
    let o = dilnet(dir.path(), &["train", "--variant", "A", "--manifest", "nowhere.json"]);
    assert_eq!(code(&o), 1);
    let o = dilnet(dir.path(), &["eval", "--ckpt", "nowhere.ckpt", "--manifest", &m]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere.ckpt"));
    let o = dilnet(dir.path(), &["prepare", "--data", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_eval_and_fuse_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let m = prepare(out, 40, 2);
    let o = dilnet(out, &["train", "--variant", "A", "--manifest", &m, "--epochs", "1", "--batch-size", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["dilationnet-A.ckpt", "trace-A.csv", "report-train-A.json", "run-train-A.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let trace = fs::read_to_string(out.join("trace-A.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "{trace}");

    let ckpt = out.join("dilationnet-A.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let o = dilnet(out, &["eval", "--ckpt", ckpt, "--manifest", &m, "--resolution", "32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report-eval-dilationnet-A-test.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 8);
    let o = dilnet(out, &["eval", "--ckpt", ckpt, "--manifest", &m, "--resolution", "64"]);
    assert_eq!(code(&o), 2);
    let o = dilnet(out, &["eval", "--ckpt", ckpt, "--manifest", &m, "--threshold", "1.5"]);
    assert_eq!(code(&o), 2);

    let o = dilnet(out, &["fuse", "--members", "A,B", "--manifest", &m, "--epochs", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("member B"), "{}", stderr(&o));

    let o = dilnet(out, &["train", "--variant", "B", "--manifest", &m, "--epochs", "1", "--batch-size", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dilnet(out, &["fuse", "--members", "B,A", "--manifest", &m, "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("fusion-A+B.ckpt").is_file());
    assert_eq!(fs::read_to_string(out.join("trace-fusion-A+B.csv")).unwrap().lines().count(), 3);
    let fused = out.join("fusion-A+B.ckpt");
    let o = dilnet(out, &["eval", "--ckpt", fused.to_str().unwrap(), "--manifest", &m, "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("| A+B |"), "{}", stdout(&o));
}

#[test]
fn divergence_fails_and_keeps_the_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let m = prepare(dir.path(), 40, 3);
    let o = dilnet(dir.path(), &["train", "--variant", "A", "--manifest", &m, "--epochs", "3", "--lr", "1e30", "--batch-size", "16"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("trace-A.csv"), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("trace-A.csv")).unwrap();
    assert!(trace.starts_with("epoch,train_loss"));
    assert!(!dir.path().join("dilationnet-A.ckpt").exists());
}

#[test]
fn out_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dilnet"))
        .args(["prepare", "--synthetic", "10"])
        .env("DILNET_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = dilnet(dir.path(), &["gradcheck", "--scope", "ops", "--instances", "2"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with("PASS")));
    assert!(dir.path().join("gradcheck-ops.csv").is_file());
    let o = dilnet(dir.path(), &["gradcheck", "--scope", "ops", "--instances", "2", "--inject-fault"]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}
