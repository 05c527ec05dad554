use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs_dir().join(name).to_str().unwrap().to_string()
}

fn superpipe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superpipe"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .env_remove("SUPERPIPE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    if !dir.exists() {
        return Vec::new();
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = superpipe(&["run", "-c", &config("default.toml")], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&out), ["summary.json", "trace.csv", "trace.json"]);
    assert!(stdout(&o).starts_with("superpipeline(k=4,k'=2)"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["peak_bytes"].as_u64(), Some(134144));
}

#[test]
fn formats_flag_limits_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = superpipe(&["run", "-c", &config("default.toml"), "--formats", "csv"], dir.path());
    assert!(o.status.success());
    assert_eq!(listing(dir.path()), ["summary.json", "trace.csv"]);
}

#[test]
fn invalid_window_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let o = superpipe(&["run", "-c", &config("default.toml"), "--k", "3", "--k-prime", "3"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(listing(&out).is_empty());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    let text = std::fs::read_to_string(config("default.toml")).unwrap().replace("n_layers", "n_layer");
    std::fs::write(&path, text).unwrap();
    let o = superpipe(&["run", "-c", path.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_layer"));
}

#[test]
fn capacity_below_one_layer_is_oom() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oom");
    let o = superpipe(&["run", "-c", &config("default.toml"), "--capacity-bytes", "1000"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("OOM"));
    assert!(listing(&out).is_empty());
}

#[test]
fn compare_reports_four_methods_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = superpipe(&["compare", "-c", &config("default.toml")], dir.path());
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(headers, ["Method", "PeakBytes", "PerItemTime", "K", "K′"]);
    let methods: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(methods, ["Standard", "CpuOnly", "Naive", "Superpipeline"]);
    let summaries: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(dir.path().join("compare.json")).unwrap()).unwrap();
    assert!(summaries.windows(2).all(|w| w[0]["output_digest"] == w[1]["output_digest"]));
}

#[test]
fn sweep_under_tiny_budget_finds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = superpipe(&["sweep", "-c", &config("default.toml"), "--budget", "100"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "none feasible");
    let rows = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 29);
}

#[test]
fn sweep_reports_best_pair() {
    let dir = tempfile::tempdir().unwrap();
    let o = superpipe(&["sweep", "-c", &config("default.toml"), "--k-range", "2..=4", "--kprime", "1..=3", "--execution", "sequential"], dir.path());
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let fastest = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[3] == "true")
        .map(|r| r[5].parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(stdout(&o).contains(&format!("per_item_time={fastest} ")), "{}", stdout(&o));
}

#[test]
fn training_config_separates_standard_from_superpipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sp = superpipe(&["train", "-c", &config("train_oom.toml")], &dir.path().join("sp"));
    assert!(sp.status.success(), "{}", String::from_utf8_lossy(&sp.stderr));
    let std_out = dir.path().join("std");
    let standard = superpipe(&["train", "-c", &config("train_oom.toml"), "--strategy", "standard"], &std_out);
    assert_eq!(standard.status.code(), Some(3));
    assert!(listing(&std_out).is_empty());
}

#[test]
fn repeated_runs_are_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        assert!(superpipe(&["run", "-c", &config("default.toml")], dir.path()).status.success());
    }
    for name in listing(a.path()) {
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_superpipe"))
        .args(["run", "-c", &config("default.toml")])
        .env("SUPERPIPE_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("summary.json").exists());
}
