//! Acceptance run: one PASS/FAIL line per criterion, with measured values,
//! tolerance and runtime against its budget. Exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use serde_json::Value;
use sosmc::checks::run_check;

const BIN: &str = env!("CARGO_BIN_EXE_sosmc");

struct Line {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

impl Line {
    fn print(&self) {
        let ok = self.passed && self.seconds < self.budget;
        println!(
            "{} c{:02} {}: {} [{:.2} s, {}]",
            if ok { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.seconds,
            if self.budget.is_finite() { format!("budget {} s", self.budget) } else { "no budget".into() }
        );
    }

    fn ok(&self) -> bool {
        self.passed && self.seconds < self.budget
    }
}

fn sosmc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("sosmc {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn check_line(id: usize, title: &'static str, name: &str, budget: f64) -> Line {
    match run_check(name, 0) {
        Ok(o) => {
            let measured: Vec<String> = o.measured.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
            Line {
                id,
                title,
                passed: o.passed,
                detail: format!("tol {:e}; {}", o.tolerance, measured.join(" ")),
                seconds: o.seconds,
                budget,
            }
        }
        Err(e) => Line {
            id,
            title,
            passed: false,
            detail: format!("error: {e}"),
            seconds: 0.0,
            budget,
        },
    }
}

fn tilted_convergence(root: &Path) -> Result<(bool, String), String> {
    let data = root.join("blobs");
    let pre = root.join("blobs_pretrain");
    let tuned = root.join("blobs_tune");
    sosmc(&["datagen", "--kind", "blobs", "--n", "20000", "--seed", "0", "--out", s(&data)])?;
    let dataset = data.join("dataset.csv");
    sosmc(&["pretrain", "--data", s(&dataset), "--seed", "1", "--out", s(&pre)])?;
    let model = pre.join("model.json");
    sosmc(&[
        "tune", "--model", s(&model), "--reward", "lower", "--beta", "0.25", "--optimizer", "adam", "--lr", "2e-3",
        "--gamma0", "5e-3", "--n", "1000", "--k", "1000", "--seeds", "11", "--eval-every", "1000", "--out", s(&tuned),
    ])?;
    let summary = read_json(&tuned.join("summary_seed11.json"))?;
    let fresh = summary["terminal"]["fresh_reward"].as_f64().ok_or("no fresh reward")?;
    let mass = summary["diagnostics"]["reference_mass"].as_f64().ok_or("no reference mass")?;
    let optimum = summary["diagnostics"]["tilted_optimum"].as_f64().ok_or("no tilted optimum")?;
    let gap = (fresh - optimum).abs();
    Ok((
        gap <= 0.1,
        format!("pi0(H)={mass:.4} optimum={optimum:.4} fresh={fresh:.4} |gap|={gap:.4} (tol 0.1)"),
    ))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn terminal_rewards(dir: &Path, seeds: &[u64]) -> Result<Vec<f64>, String> {
    seeds
        .iter()
        .map(|s| {
            let v = read_json(&dir.join(format!("summary_seed{s}.json")))?;
            v["terminal"]["particle_reward"].as_f64().ok_or_else(|| format!("seed {s}: no particle reward"))
        })
        .collect()
}

fn method_ordering(root: &Path) -> Result<(bool, String), String> {
    let seeds: Vec<u64> = (0..10).collect();
    let list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let mut stats = Vec::new();
    for method in ["sosmc", "impdiff", "soul"] {
        let dir = root.join(format!("mixture_{method}"));
        sosmc(&[
            "tune", "--method", method, "--objective", "forward_kl", "--task", "sparse", "--reward", "hard_gated",
            "--n", "1000", "--k", "1000", "--optimizer", "sgd", "--lr", "0.1", "--gamma0", "0.1", "--seeds", &list,
            "--out", s(&dir),
        ])?;
        stats.push(mean_std(&terminal_rewards(&dir, &seeds)?));
    }
    let [(sm, ss), (im, is), (um, us)] = [stats[0], stats[1], stats[2]];
    let soul_more_variable = us > ss;
    Ok((
        sm >= im,
        format!(
            "sosmc {sm:.4}±{ss:.4} >= impdiff {im:.4}±{is:.4}; soul {um:.4}±{us:.4} (report: soul std > sosmc std is {soul_more_variable})"
        ),
    ))
}

fn determinism(root: &Path) -> Result<(bool, String), String> {
    let model = root.join("blobs_pretrain").join("model.json");
    let mut runs: Vec<(String, Vec<String>)> = ["sosmc", "impdiff", "soul"]
        .iter()
        .map(|m| {
            (
                format!("sparse/{m}"),
                ["--method", m, "--task", "sparse", "--n", "200", "--k", "100", "--seeds", "5"]
                    .map(String::from)
                    .to_vec(),
            )
        })
        .collect();
    if model.is_file() {
        runs.push((
            "blobs/sosmc".into(),
            vec![
                "--model".into(),
                model.display().to_string(),
                "--n".into(),
                "200".into(),
                "--k".into(),
                "20".into(),
                "--seeds".into(),
                "5".into(),
                "--init-burn-in".into(),
                "200".into(),
            ],
        ));
    }
    let mut same = Vec::new();
    for (i, (label, args)) in runs.iter().enumerate() {
        let mut traces = Vec::new();
        for rep in 0..2 {
            let dir = root.join(format!("repeat_{i}_{rep}"));
            let mut full: Vec<&str> = vec!["tune"];
            full.extend(args.iter().map(String::as_str));
            full.extend(["--out", s(&dir)]);
            sosmc(&full)?;
            traces.push(std::fs::read(dir.join("trace_seed5.csv")).map_err(|e| e.to_string())?);
        }
        same.push((label.clone(), traces[0] == traces[1]));
    }
    let all = same.iter().all(|(_, b)| *b);
    let detail = same.iter().map(|(l, b)| format!("{l}={}", if *b { "identical" } else { "differs" })).collect::<Vec<_>>();
    Ok((all, detail.join(" ")))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn timed(id: usize, title: &'static str, budget: f64, f: impl FnOnce() -> Result<(bool, String), String>) -> Line {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Line {
        id,
        title,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
        budget,
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root: PathBuf = tmp.path().to_path_buf();
    let mut lines = Vec::new();
    let checks: [(&str, &str, f64); 8] = [
        ("weight identity", "weight_identity", 10.0),
        ("feynman-kac estimator", "feynman_kac", 30.0),
        ("gradient mse slope", "mse_slope", 300.0),
        ("idealised descent rate", "idealized_rate", 1.0),
        ("ess at infinity", "ess_infinity", 30.0),
        ("chi-square small step", "chi2_small_gamma", 1.0),
        ("gradient oracle", "gradient_oracle", 120.0),
        ("surrogate equivalence", "surrogate_equivalence", 60.0),
    ];
    for (i, (title, name, budget)) in checks.into_iter().enumerate() {
        let line = check_line(i + 1, title, name, budget);
        line.print();
        lines.push(line);
    }
    let line = timed(9, "tilted optimum convergence", 900.0, || tilted_convergence(&root));
    line.print();
    lines.push(line);
    let line = timed(10, "method ordering", 600.0, || method_ordering(&root));
    line.print();
    lines.push(line);
    let line = timed(11, "determinism", f64::INFINITY, || determinism(&root));
    line.print();
    lines.push(line);

    let failed = lines.iter().filter(|l| !l.ok()).count();
    println!("acceptance: {} of {} criteria pass", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
