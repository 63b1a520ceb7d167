use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let line = stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("run directory: ").map(str::to_string))
        .expect("train prints its run directory");
    PathBuf::from(line)
}

fn train(out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--steps", "12", "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = hill(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    run_dir(&o)
}

#[test]
fn missing_config_names_the_path() {
    let o = hill(&["train", "--config", "/nonexistent/run.toml", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn invalid_config_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "G = 1\n").unwrap();
    let o = hill(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = hill(&["train", "--mode", "PPO", "--steps", "1", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_metrics_and_runs_are_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), &["--seed", "3"]);
    let b = train(tmp.path(), &["--seed", "3"]);
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("audit.jsonl")).unwrap(), fs::read(b.join("audit.jsonl")).unwrap());
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"));
    assert!(a.join("checkpoints/reasoner-final.ckpt").exists());
    assert!(a.join("checkpoints/hinter-step-000000.ckpt").exists());
}

#[test]
fn grpo_writes_no_audit_log() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), &["--mode", "GRPO"]);
    assert!(dir.join("metrics.jsonl").exists());
    assert!(!dir.join("audit.jsonl").exists());
    let o = hill(&["train", "--mode", "grpo", "--steps", "3", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(stdout(&o).contains("hinter invocations: 0"));
}

#[test]
fn verify_identity_passes_and_handles_zero_cases() {
    let o = hill(&["verify-identity", "--cases", "100"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("cases: 100"));
    assert!(text.contains("transfer-bound violations: 0"));
    assert!(text.contains("result: ok"));

    let o = hill(&["verify-identity", "--cases", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("cases: 0"));
}

#[test]
fn oversized_enumeration_exits_with_budget_code() {
    let o = hill(&["verify-identity", "--cases", "5", "--max-len", "6"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn compare_writes_one_row_per_run_and_per_mode_medians() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hill(&[
        "compare",
        "--modes",
        "GRPO,HiLL",
        "--seeds",
        "0,1,2",
        "--steps",
        "10",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("compare");
    let runs = fs::read_to_string(dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 6);

    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "median_final_eval").unwrap();
    for mode in ["GRPO", "HiLL"] {
        let mut evals: Vec<f64> = runs
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(mode))
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        evals.sort_by(|a, b| a.total_cmp(b));
        let row: Vec<&str> = lines.iter().find(|l| l.starts_with(&format!("{mode},"))).unwrap().split(',').collect();
        assert_eq!(row[1], "3");
        assert_eq!(row[col].parse::<f64>().unwrap(), evals[1]);
    }

    let o = hill(&["compare", "--modes", "GRPO", "--steps", "1", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_csv_has_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), &[]);
    let out = tmp.path().join("m.csv");
    let o = hill(&["export-csv", "--metrics", dir.join("metrics.jsonl").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("step,all_incorrect_ratio_before"));
    assert!(header.ends_with("eval_tier_4"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    let width = header.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == width));

    let o = hill(&["export-csv", "--metrics", tmp.path().join("none.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
