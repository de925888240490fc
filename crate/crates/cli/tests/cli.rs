use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn socratic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socratic"))
        .args(args)
        .env_remove("SOCRATIC_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small probe set so eval-style commands stay fast.
fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, r#"{"probe": {"tasks": 8, "samples_per_task": 4}}"#).unwrap();
    p(&path).to_string()
}

/// Short full run; returns the output directory.
fn short_run(dir: &Path, arm: &str) -> std::path::PathBuf {
    let out = dir.join(format!("run-{arm}"));
    let cfg = small_config(dir);
    let o = socratic(&["--config", &cfg, "run", "--out", p(&out), "--arm", arm, "--episodes", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"learner": {"learning_rat": 0.1}}"#).unwrap();
    let o = socratic(&["--config", p(&cfg), "run", "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learner"), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_two() {
    let o = socratic(&["kb", "inspect", "/nonexistent/kb.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/kb.jsonl"));
}

#[test]
fn unknown_flag_exits_two() {
    let o = socratic(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_seed_env_exits_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_socratic"))
        .args(["kb", "inspect", "/dev/null"])
        .env("SOCRATIC_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SOCRATIC_SEED"));
}

#[test]
fn empty_kb_has_zero_viewpoints() {
    let dir = TempDir::new().unwrap();
    let kb = dir.path().join("kb.jsonl");
    fs::write(&kb, "").unwrap();
    let o = socratic(&["kb", "inspect", p(&kb)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0 viewpoints");
}

#[test]
fn run_writes_artifacts_and_respects_arm() {
    let dir = TempDir::new().unwrap();
    let out = short_run(dir.path(), "outcome-only");
    for f in ["metrics.csv", "kb.jsonl", "bank.json", "distill_reports.json", "policy_final.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r.contains("outcome-only")));
    // No teacher, no viewpoints.
    let o = socratic(&["kb", "inspect", p(&out.join("kb.jsonl"))]);
    assert_eq!(stdout(&o).lines().next(), Some("0 viewpoints"));
}

#[test]
fn kb_filter_and_sort() {
    let dir = TempDir::new().unwrap();
    let out = short_run(dir.path(), "full-socratic");
    let kb = out.join("kb.jsonl");

    let all = socratic(&["kb", "inspect", p(&kb)]);
    assert!(all.status.success());
    let total: usize = stdout(&all).split_whitespace().next().unwrap().parse().unwrap();
    assert!(total > 0);

    let mut filtered = 0;
    for class in ["paren-violation", "precedence-violation", "miscompute"] {
        let o = socratic(&["kb", "inspect", p(&kb), "--class", class]);
        assert!(o.status.success());
        let text = stdout(&o);
        let n: usize = text.split_whitespace().next().unwrap().parse().unwrap();
        let headers = text.lines().filter(|l| l.contains("  [")).count();
        assert_eq!(n, headers);
        filtered += n;
    }
    assert_eq!(filtered, total);

    let o = socratic(&["kb", "inspect", p(&kb), "--by-utility"]);
    let utilities: Vec<f64> = stdout(&o)
        .lines()
        .filter_map(|l| l.split("U = ").nth(1))
        .map(|rest| rest.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert!(!utilities.is_empty());
    assert!(utilities.windows(2).all(|w| w[0] >= w[1]), "{utilities:?}");
}

#[test]
fn export_instructions_writes_jsonl() {
    let dir = TempDir::new().unwrap();
    let out = short_run(dir.path(), "full-socratic");
    let dest = dir.path().join("instructions.jsonl");
    let o = socratic(&["kb", "export-instructions", p(&out.join("kb.jsonl")), "--out", p(&dest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&dest).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["instruction"].as_str().unwrap().starts_with("Solve the following"));
        assert!(v["input"].is_string());
        assert!(v["output"].is_string());
    }
}

#[test]
fn report_single_and_mismatched() {
    let dir = TempDir::new().unwrap();
    let out = short_run(dir.path(), "viewpoint-guided");
    let metrics = out.join("metrics.csv");

    let o = socratic(&["report", p(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "file,arm,episodes,final_ma100,episodes_to_threshold,kb_size");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].contains(",viewpoint-guided,120,"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "episode,something_else\n1,2\n").unwrap();
    let o = socratic(&["report", p(&metrics), p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.csv"));
}

#[test]
fn eval_scores_always_correct_policy_at_one() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    // exact mode, max precedence, leftmost
    let policy = dir.path().join("policy.json");
    fs::write(
        &policy,
        r#"{"feature_version": 1, "theta": [0, 0, 30, 30, 60, 0, 0, 0, 0], "temperature": 1.0}"#,
    )
    .unwrap();
    let o = socratic(&["--config", &cfg, "eval", "--policy", p(&policy)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("score 1.0000"), "{}", stdout(&o));
}

#[test]
fn eval_rejects_wrong_feature_version() {
    let dir = TempDir::new().unwrap();
    let policy = dir.path().join("policy.json");
    fs::write(&policy, r#"{"feature_version": 7, "theta": [0, 0, 0, 0, 0, 0, 0, 0, 0], "temperature": 1.0}"#).unwrap();
    let o = socratic(&["eval", "--policy", p(&policy)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_env_is_a_fallback() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let policy = dir.path().join("policy.json");
    fs::write(&policy, r#"{"feature_version": 1, "theta": [0, 0, 0, 0, 0, 0, 0, 0, 0], "temperature": 1.0}"#).unwrap();
    let seed_of = |o: &Output| -> u64 {
        let json = stdout(o).lines().find(|l| l.starts_with('{')).unwrap().to_string();
        serde_json::from_str::<serde_json::Value>(&json).unwrap()["seed"].as_u64().unwrap()
    };
    let env_only = Command::new(env!("CARGO_BIN_EXE_socratic"))
        .args(["--config", &cfg, "eval", "--policy", p(&policy)])
        .env("SOCRATIC_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(seed_of(&env_only), 17);
    let flag_wins = Command::new(env!("CARGO_BIN_EXE_socratic"))
        .args(["--config", &cfg, "--seed", "5", "eval", "--policy", p(&policy)])
        .env("SOCRATIC_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(seed_of(&flag_wins), 5);
    assert_eq!(seed_of(&socratic(&["--config", &cfg, "eval", "--policy", p(&policy)])), 0);
}
