use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn verify(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_verify"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("VERIFY_THREADS", t),
        None => cmd.env_remove("VERIFY_THREADS"),
    };
    cmd.output().expect("verify runs")
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(dir: &Path, task: &str, cfg: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec![task, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    verify(&args, None)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn strip_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

const H1_SCAN: &str = r#"{"group": "heisenberg(1)", "N": 5, "n_samples": 300}"#;

#[test]
fn mcp_scan_passes_at_the_sharp_exponent() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "c.json", H1_SCAN);
    let out = run(dir.path(), "mcp-scan", &cfg, "o", &["--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&dir.path().join("o/mcp-scan-seed7.json"));
    assert_eq!(s["passed"], true);
    assert!(s["stats"]["inf_ratio"].as_f64().unwrap() >= 1.0 - 1e-6);
    assert_eq!(s["config"]["seed"], 7);
    let csv = fs::read_to_string(dir.path().join("o/mcp-scan-seed7.csv")).unwrap();
    assert!(csv.starts_with("group,N,s,zeta_norm,tau_norm,ratio,seed,index\n"));
}

#[test]
fn mcp_scan_fails_below_the_sharp_exponent() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"group": "heisenberg(1)", "N": 4.5, "n_samples": 300}"#);
    let out = run(dir.path(), "mcp-scan", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("violations"), "{stdout}");
    let s = read_json(&dir.path().join("o/mcp-scan-seed0.json"));
    assert_eq!(s["passed"], false);
    assert!(s["stats"]["violations"].as_u64().unwrap() >= 1);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    for (name, body) in [
        ("missing.json", r#"{"N": 5}"#),
        ("unknown.json", r#"{"group": "heisenberg(1)", "N": 5, "colour": 1}"#),
        ("foreign.json", r#"{"group": "heisenberg(1)", "N": 5, "n_paths": 10}"#),
        ("badgroup.json", r#"{"group": "heisenberg(0)", "N": 5}"#),
        ("syntax.json", "{"),
    ] {
        let cfg = config(dir.path(), name, body);
        let out = run(dir.path(), "mcp-scan", &cfg, "o", &[]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = verify(&["mcp-scan", "--config", "/nonexistent.json"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "c.json", H1_SCAN);
    let mut bodies = Vec::new();
    for (out, threads) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let o = dir.path().join(out);
        let res = verify(
            &["mcp-scan", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "--seed", "3"],
            Some(threads),
        );
        assert_eq!(res.status.code(), Some(0));
        let csv = fs::read(o.join("mcp-scan-seed3.csv")).unwrap();
        let json = strip_timestamp(read_json(&o.join("mcp-scan-seed3.json")));
        bodies.push((csv, json));
    }
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0], bodies[2]);
}

#[test]
fn zero_threads_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "c.json", H1_SCAN);
    let o = dir.path().join("o");
    let out = verify(&["mcp-scan", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()], Some("0"));
    assert_eq!(out.status.code(), Some(2));
}

/// Three summaries: two passing tasks and one failing scan.
fn summaries(dir: &Path) -> Vec<PathBuf> {
    let a = config(dir, "a.json", r#"{"group": "heisenberg(1)", "n_samples": 50}"#);
    let b = config(dir, "b.json", r#"{"group": "n32", "n_samples": 50}"#);
    let c = config(dir, "c.json", r#"{"group": "heisenberg(1)", "N": 4.5, "n_samples": 50}"#);
    assert_eq!(run(dir, "algebra-check", &a, "a", &[]).status.code(), Some(0));
    assert_eq!(run(dir, "algebra-check", &b, "b", &[]).status.code(), Some(0));
    assert_eq!(run(dir, "mcp-scan", &c, "c", &[]).status.code(), Some(3));
    vec![
        dir.join("a/algebra-check-seed0.json"),
        dir.join("b/algebra-check-seed0.json"),
        dir.join("c/mcp-scan-seed0.json"),
    ]
}

fn merge(dir: &Path, inputs: &[&PathBuf], out: &str) -> (Option<i32>, Value) {
    let target = dir.join(out);
    let mut args = vec!["merge".to_string()];
    args.extend(inputs.iter().map(|p| p.to_str().unwrap().to_string()));
    args.extend(["--out".into(), target.to_str().unwrap().into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let res = verify(&refs, None);
    (res.status.code(), read_json(&target))
}

#[test]
fn merge_is_order_free_idempotent_and_conjunctive() {
    let dir = TempDir::new().unwrap();
    let s = summaries(dir.path());
    let (code, m1) = merge(dir.path(), &[&s[0], &s[1], &s[2]], "m1.json");
    assert_eq!(code, Some(3));
    assert_eq!(m1["passed"], false);
    let (_, m2) = merge(dir.path(), &[&s[2], &s[0], &s[1]], "m2.json");
    let (_, m3) = merge(dir.path(), &[&s[1], &s[2], &s[0]], "m3.json");
    assert_eq!(m1, m2);
    assert_eq!(m1, m3);

    let merged = dir.path().join("m1.json");
    let (_, again) = merge(dir.path(), &[&merged], "m4.json");
    assert_eq!(again, m1);
    let (_, with_dup) = merge(dir.path(), &[&merged, &s[0]], "m5.json");
    assert_eq!(with_dup, m1);

    let (code, passing) = merge(dir.path(), &[&s[0], &s[1]], "m6.json");
    assert_eq!(code, Some(0));
    assert_eq!(passing["passed"], true);
}

#[test]
fn merge_of_one_file_keeps_its_content() {
    let dir = TempDir::new().unwrap();
    let s = summaries(dir.path());
    let (_, m) = merge(dir.path(), &[&s[0]], "m.json");
    let entries = m["tasks"]["algebra-check"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0], strip_timestamp(read_json(&s[0])));
}

#[test]
fn merge_names_the_offending_file() {
    let dir = TempDir::new().unwrap();
    let bad = config(dir.path(), "not-a-summary.json", r#"{"hello": 1}"#);
    let out = verify(&["merge", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not-a-summary.json"));
}

#[test]
fn every_task_runs_on_a_small_config() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("algebra-check", r#"{"group": "htype(4,3)", "n_samples": 100}"#),
        ("exp-check", r#"{"group": "heisenberg(1)", "n_samples": 50}"#),
        ("distance-check", r#"{"group": "heisenberg(2)", "n_samples": 200}"#),
        ("weighted-mcp-scan", r#"{"group": "heisenberg(1)", "N": 5, "n_samples": 30}"#),
        ("n32-chain", r#"{"group": "n32", "n_samples": 30}"#),
        ("core-lemma", r#"{"group": "heisenberg(1)", "n_samples": 5}"#),
        ("qbe-scan", r#"{"group": "heisenberg(1)", "n_functions": 2, "n_points": 2, "h": [1], "n_paths": 2000}"#),
        ("volume-check", r#"{"group": "heisenberg(1)", "radii": [1, 2]}"#),
    ];
    for (task, body) in cases {
        let cfg = config(dir.path(), &format!("{task}.json"), body);
        let out = run(dir.path(), task, &cfg, task, &[]);
        assert_eq!(out.status.code(), Some(0), "{task}: {}", String::from_utf8_lossy(&out.stderr));
        let s = read_json(&dir.path().join(format!("{task}/{task}-seed0.json")));
        assert_eq!(s["task"], task);
        assert_eq!(s["input_hash"].as_str().unwrap().len(), 64);
        let csv = fs::read_to_string(dir.path().join(format!("{task}/{task}-seed0.csv"))).unwrap();
        let header = csv.lines().next().unwrap();
        assert!(header.contains("seed"), "{task}: {header}");
        assert!(csv.lines().count() > 1, "{task}: empty table");
    }
}

#[test]
fn inline_groups_are_accepted() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"group": {"structure": [[[0, 1, 0, 0], [-1, 0, 0, 0], [0, 0, 0, 2], [0, 0, -2, 0]]]}, "n_samples": 100}"#,
    );
    let out = run(dir.path(), "algebra-check", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
