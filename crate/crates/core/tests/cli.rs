use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scrat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrat")).args(args).output().unwrap()
}

fn smoke(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke").join(name)
}

fn write(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_echoes_resolved_config() {
    let out = scrat(&["validate", "--config", smoke("family_d.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["env"]["n_constraints"], 40);
    assert_eq!(v["agent"]["mode"], "differentiated");
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"family": "A", "seeds": {"start": 0, "end": 2}, "env": {"delay": -1}}"#, "env.delay"),
        (r#"{"family": "B", "seeds": {"start": 0, "end": 2}, "ablations": ["no_feedback"]}"#, "ablations[0]"),
        (r#"{"family": "C", "seeds": {"start": 0, "end": 2}, "agnet": {}}"#, "agnet"),
        (r#"{"family": "D", "seeds": {"start": 3, "end": 3}}"#, "seeds"),
    ];
    for (doc, needle) in cases {
        let out = scrat(&["validate", "--config", &write(dir.path(), doc)]);
        assert_eq!(out.status.code(), Some(1), "{doc}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{needle} not in {err}");
    }
    let out = scrat(&["validate", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = scrat(&[
        "run",
        "--config",
        smoke("family_a.json").to_str().unwrap(),
        "--seeds",
        "0..3",
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["resolved_config.json", "runs.jsonl", "summary.csv", "constraint_report.json", "failures.md", "timing.json"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let runs = fs::read_to_string(out_dir.join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 4 * 3);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("variant,metric,mean,median,p95,ci_lo,ci_hi,n_seeds,effect_size_vs_baseline"));

    let out = scrat(&["report", "--in", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out_dir.join("runs.jsonl")).unwrap(), runs);
    assert_eq!(fs::read_to_string(out_dir.join("summary.csv")).unwrap(), summary);
}

#[test]
fn failed_cells_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    let out = scrat(&[
        "run",
        "--config",
        smoke("family_d.json").to_str().unwrap(),
        "--seeds",
        "0..2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    // Corrupt one record into a failed cell and rebuild the report.
    let runs = fs::read_to_string(out_dir.join("runs.jsonl")).unwrap();
    let mut lines: Vec<serde_json::Value> = runs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[0]["status"] = "failed".into();
    lines[0]["error"] = "injected".into();
    let text: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(out_dir.join("runs.jsonl"), text).unwrap();
    let out = scrat(&["report", "--in", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_to_string(out_dir.join("failures.md")).unwrap().contains("injected"));
}
