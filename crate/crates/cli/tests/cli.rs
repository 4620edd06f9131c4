use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("mixmem-cli-{name}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, file: &str) -> String {
        self.0.join(file).to_str().unwrap().to_string()
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn mixmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixmem")).args(args).output().unwrap()
}

fn report(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn simulate(dir: &Scratch, extra: &[&str]) -> (String, String) {
    let (data, truth) = (dir.path("data.csv"), dir.path("truth.json"));
    let mut args = vec!["simulate", "--data", &data, "--truth", &truth, "--seed", "3"];
    args.extend_from_slice(extra);
    report(&mixmem(&args));
    (data, truth)
}

#[test]
fn simulate_fit_eval_round_trip() {
    let dir = Scratch::new("pipeline");
    let (data, truth) = simulate(&dir, &[]);
    let est = dir.path("fit.json");
    let fit = report(&mixmem(&["fit", "--data", &data, "--k", "3", "--alpha0", "0.3", "--out", &est, "--seed", "3"]));
    assert_eq!(fit["command"], "fit");
    assert_eq!(fit["seed"], 3);
    assert_eq!(fit["params"]["k"], 3);
    let parts = fit["partition_reports"].as_array().unwrap();
    assert!(!parts.is_empty());
    assert!(parts.iter().all(|p| p["permutation"].as_array().unwrap().len() == 3));

    let out = mixmem(&["eval", "--estimate", &est, "--truth", &truth]);
    let eval = report(&out);
    let rmse = eval["metrics"]["rmse"].as_f64().unwrap();
    assert!(rmse > 0.0 && rmse < 0.3, "{rmse}");
    assert!(stderr(&out).lines().any(|l| l.starts_with("rmse: ")));
    assert!(stderr(&out).lines().any(|l| l == "seed: 0"));

    let same = report(&mixmem(&["eval", "--estimate", &truth, "--truth", &truth]));
    assert_eq!(same["metrics"]["rmse"].as_f64().unwrap(), 0.0);
}

#[test]
fn runs_repeat_exactly_for_a_seed() {
    let a = Scratch::new("det-a");
    let b = Scratch::new("det-b");
    let (data_a, truth_a) = simulate(&a, &["--n", "300", "--p", "12", "--delta", "0.1"]);
    let (data_b, truth_b) = simulate(&b, &["--n", "300", "--p", "12", "--delta", "0.1"]);
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&data_a), read(&data_b));
    assert_eq!(read(&truth_a), read(&truth_b));

    let fit = |dir: &Scratch, data: &str| {
        let out = dir.path("fit.json");
        let r = report(&mixmem(&["fit", "--data", data, "--k", "3", "--alpha0", "0.3", "--out", &out, "--workers", "2"]));
        (r, read(&out))
    };
    let (ra, ma) = fit(&a, &data_a);
    let (rb, mb) = fit(&b, &data_b);
    assert_eq!(ma, mb);
    assert_eq!(ra["partition_reports"], rb["partition_reports"]);
}

#[test]
fn bench_reports_one_row_per_partition_count() {
    let dir = Scratch::new("bench");
    let (data, truth) = simulate(&dir, &[]);
    let bench = report(&mixmem(&[
        "bench", "--data", &data, "--k", "3", "--alpha0", "0.3", "--partitions", "5,10,20", "--truth", &truth,
    ]));
    let rows = bench["metrics"]["runtimes"].as_array().unwrap();
    let counts: Vec<u64> = rows.iter().map(|r| r["partitions"].as_u64().unwrap()).collect();
    assert_eq!(counts, [5, 10, 20]);
    assert!(rows.iter().all(|r| r["seconds"].as_f64().unwrap() >= 0.0 && r["rmse"].is_number()));
}

#[test]
fn negfrac_reports_a_fraction() {
    let dir = Scratch::new("negfrac");
    let (data, _) = simulate(&dir, &["--n", "100"]);
    let out = report(&mixmem(&["negfrac", "--data", &data, "--alpha0", "0.3", "--block", "0,1:2,3:4"]));
    let f = out["metrics"]["negative_fraction"].as_f64().unwrap();
    assert!(f > 0.0 && f < 1.0, "{f}");
}

#[test]
fn config_file_supplies_flags() {
    let dir = Scratch::new("config");
    let cfg = dir.path("cfg.json");
    let (data, truth) = (dir.path("d.csv"), dir.path("t.json"));
    std::fs::write(&cfg, serde_json::json!({"n": 40, "p": 6, "data": data, "truth": truth, "seed": 11}).to_string()).unwrap();
    let out = report(&mixmem(&["simulate", "--config", &cfg, "--p", "7"]));
    assert_eq!(out["seed"], 11);
    assert_eq!(out["params"]["n"], 40);
    assert_eq!(out["params"]["p"], 7);
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn report_flag_writes_the_report_file() {
    let dir = Scratch::new("report");
    let path = dir.path("report.json");
    let (data, truth) = (dir.path("data.csv"), dir.path("truth.json"));
    let out = mixmem(&["simulate", "--n", "20", "--data", &data, "--truth", &truth, "--report", &path]);
    assert!(out.status.success() && out.stdout.is_empty());
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(saved["command"], "simulate");
}

fn assert_failure(out: &Output, code: i32, category: &str) {
    assert_eq!(out.status.code(), Some(code), "{}", stderr(out));
    let last = stderr(out).lines().last().unwrap_or_default().to_string();
    assert!(last.starts_with(&format!("error[{category}]: ")), "{last}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = Scratch::new("errors");
    assert_failure(&mixmem(&["fit", "--k", "3"]), 2, "argument");
    assert_failure(&mixmem(&["fit", "--data", "x", "--k", "3", "--alpha0", "0.3", "--out", "y", "--matcher", "nope"]), 2, "argument");

    let bad = dir.path("bad.csv");
    std::fs::write(&bad, "d=4,d=4\n0,3\n2,9\n").unwrap();
    let out = mixmem(&["negfrac", "--data", &bad, "--alpha0", "0.3", "--block", "0:1:1"]);
    assert_failure(&out, 3, "parse");
    assert!(stderr(&out).contains("line 3"));

    let missing = dir.path("missing.csv");
    assert_failure(&mixmem(&["negfrac", "--data", &missing, "--alpha0", "0.3"]), 5, "io");

    let (data, _) = simulate(&dir, &["--n", "200", "--p", "9"]);
    let est = dir.path("fit.json");
    let base = ["fit", "--data", &data, "--k", "3", "--alpha0", "0.3", "--out", &est, "--max-iters", "2"];
    report(&mixmem(&base));
    let strict: Vec<&str> = base.iter().copied().chain(["--strict"]).collect();
    let out = mixmem(&strict);
    assert_failure(&out, 4, "solver");
    assert!(Path::new(&est).exists());
    let partial: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(partial["partition_reports"].as_array().unwrap().iter().any(|p| p["converged"] == false));
}
