use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_sosmc");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn sosmc")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "sosmc {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data");
    run_ok(&["datagen", "--kind", "blobs", "--n", "500", "--seed", "2", "--out", p(&out)]);
    out.join("dataset.csv")
}

#[test]
fn datagen_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["datagen", "--kind", "two_moons", "--n", "300", "--seed", "4", "--out", p(out)]);
    }
    let text = std::fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2"));
    assert_eq!(text.lines().count(), 301);
    assert_eq!(text.as_bytes(), std::fs::read(b.join("dataset.csv")).unwrap());
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "datagen");
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "dataset.csv"));
}

#[test]
fn datagen_rejects_too_few_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["datagen", "--n", "0", "--out", p(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn zero_epochs_leave_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("pre");
    run_ok(&["pretrain", "--data", p(&data), "--epochs", "0", "--out", p(&out)]);
    let init = json(&out.join("init_model.json"));
    let model = json(&out.join("model.json"));
    assert_eq!(init, model);
}

#[test]
fn pretrain_needs_an_existing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = run(&["pretrain", "--data", p(&missing), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn paper_scale_pretrain_echoes_its_constants() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("pre");
    run_ok(&["pretrain", "--data", p(&data), "--paper-scale", "--epochs", "0", "--out", p(&out)]);
    let m = json(&out.join("manifest.json"));
    let eff = &m["effective"];
    assert_eq!(eff["paper_scale"], true);
    assert_eq!(eff["architecture"]["hidden_width"], 128);
    assert_eq!(eff["architecture"]["hidden_layers"], 4);
    assert_eq!(eff["pcd"]["batch_size"], 512);
    assert_eq!(eff["pcd"]["buffer_size"], 20000);
}

#[test]
fn tune_writes_one_trace_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tune");
    run_ok(&[
        "tune", "--task", "dual", "--n", "100", "--k", "20", "--seeds", "1,2,3", "--eval-every", "10", "--out", p(&out),
    ]);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([1, 2, 3]));
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o.as_str().unwrap()).collect();
    for s in 1..=3 {
        let name = format!("trace_seed{s}.csv");
        assert!(outputs.contains(&name.as_str()));
        let text = std::fs::read_to_string(out.join(&name)).unwrap();
        assert_eq!(text.lines().count(), 21);
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "fresh_reward").unwrap();
        let filled: Vec<bool> = text
            .lines()
            .skip(1)
            .map(|l| !l.split(',').nth(col).unwrap().is_empty())
            .collect();
        assert_eq!(filled.iter().filter(|f| **f).count(), 2);
    }
}

#[test]
fn soul_needs_an_even_chain_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["tune", "--method", "soul", "--n", "101", "--k", "5", "--out", p(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn forward_kl_needs_an_exact_reference_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let pre = dir.path().join("pre");
    run_ok(&["pretrain", "--data", p(&data), "--epochs", "0", "--out", p(&pre)]);
    let model = pre.join("model.json");
    let out = run(&[
        "tune", "--model", p(&model), "--objective", "forward_kl", "--k", "2", "--n", "10", "--out",
        p(&dir.path().join("t")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "kind = \"circles\"\nn = 50\nseed = 9\n").unwrap();
    let out = dir.path().join("d");
    run_ok(&["datagen", "--config", p(&cfg), "--n", "70", "--out", p(&out)]);
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 71);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["effective"]["kind"], "circles");
    assert_eq!(m["effective"]["seed"], 9);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "colour = \"red\"\n").unwrap();
    let out = run(&["datagen", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["datagen", "--n", "10"])
        .env("SOSMC_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("datagen").join("dataset.csv").is_file());
}

#[test]
fn check_subset_reports_only_what_was_asked() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&["check", "--only", "weight_identity", "--out", p(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    let report = json(&dir.path().join("check_report.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 1);
    assert_eq!(report["checks"][0]["name"], "weight_identity");
}

#[test]
fn unknown_check_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["check", "--only", "nonsense", "--out", p(dir.path())]);
    assert!(!out.status.success());
}
