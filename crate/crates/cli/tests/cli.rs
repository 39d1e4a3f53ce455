//! End-to-end tests of the `jkpanel` binary: exit codes, JSON outputs,
//! stderr summaries, and cross-invocation consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jkpanel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const ONEWAY_HALVES: &str = r#"{
  "dims": [6, 6],
  "fixed_effects": [{"axes": [0]}],
  "subsamples": [
    {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[0, 6]]}]},
    {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[0, 3]]}]},
    {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[3, 6]]}]}
  ]
}"#;

/// Noiseless linear one-way panel: y = 2x + 0.5·i on a 6×6 grid.
fn noiseless_csv() -> String {
    let mut rows = vec!["i,t,y,x".to_string()];
    for i in 0..6 {
        for t in 0..6 {
            let x = ((i * 7 + t * 3) % 5) as f64 - 2.0;
            let y = 2.0 * x + 0.5 * i as f64;
            rows.push(format!("{i},{t},{y},{x}"));
        }
    }
    rows.join("\n") + "\n"
}

#[test]
fn design_reports_oneway_halves() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);

    let out = run(&["design", spec.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report = stdout_json(&out);
    assert_eq!(report["valid"], serde_json::json!(true));
    assert_eq!(report["m"], serde_json::json!(3));
    assert_eq!(report["A"], serde_json::json!([[1.0], [2.0], [2.0]]));
    let v: Vec<f64> = serde_json::from_value(report["weights"]["v_star"].clone()).unwrap();
    let expected = [2.0, -0.5, -0.5];
    for (got, want) in v.iter().zip(expected) {
        assert!((got - want).abs() < 1e-10, "v* = {v:?}");
    }
    assert_eq!(report["weights"]["q"], serde_json::json!(1));
}

#[test]
fn conflicting_design_exits_two_with_reason() {
    // Two bias terms but every subsample keeps all units, so the second
    // loading column is constant: the level constraint conflicts.
    let spec_text = r#"{
      "dims": [6, 6],
      "fixed_effects": [{"axes": [0]}, {"axes": [1]}],
      "subsamples": [
        {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[0, 6]]}]},
        {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[0, 3]]}]},
        {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[3, 6]]}]},
        {"axes": [{"blocks": [[0, 6]]}, {"blocks": [[0, 2]]}]}
      ]
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "conflict.json", spec_text);

    let out = run(&["design", spec.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("add subsamples"), "stderr: {stderr}");

    // The JSON report still appears, flagged invalid with no weights.
    let report = stdout_json(&out);
    assert_eq!(report["valid"], serde_json::json!(false));
    assert!(report["weights"].is_null());
    assert!(!report["failure_reasons"].as_array().unwrap().is_empty());
}

#[test]
fn missing_files_exit_one() {
    let out = run(&["design", "/nonexistent/design.json"]);
    assert_eq!(exit_code(&out), 1);

    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let out = run(&[
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        "/nonexistent/panel.csv",
        "--estimator",
        "within_ls",
    ]);
    assert_eq!(exit_code(&out), 1);

    let out = run(&["simulate", "/nonexistent/study.json"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn malformed_design_json_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "broken.json", "{ not json");
    let out = run(&["design", spec.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn noiseless_infer_is_exact_and_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let csv = write_file(dir.path(), "panel.csv", &noiseless_csv());

    let out = run(&[
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--estimator",
        "within_ls",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let result = stdout_json(&out);
    assert!((result["phi_tilde"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(result["sigma_tilde"].as_f64().unwrap(), 0.0);
    assert_eq!(result["degenerate_variance"], serde_json::json!(true));
    assert!(result["j_statistic"].is_null());

    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "expected degeneracy warning, got: {stderr}");
    assert!(stderr.contains("p = n/a"), "summary line: {stderr}");
}

#[test]
fn csv_grid_hole_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    // Drop one interior row from the dense grid.
    let full = noiseless_csv();
    let holed: Vec<&str> = full.lines().filter(|l| !l.starts_with("3,4,")).collect();
    let csv = write_file(dir.path(), "holed.csv", &(holed.join("\n") + "\n"));

    let out = run(&[
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--estimator",
        "within_ls",
    ]);
    assert_eq!(exit_code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("shape mismatch"), "stderr: {stderr}");
}

#[test]
fn unknown_estimator_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let csv = write_file(dir.path(), "panel.csv", &noiseless_csv());
    let out = run(&[
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--estimator",
        "bogus",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("within_ls"));
}

#[test]
fn constant_regressor_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let mut rows = vec!["i,t,y,x".to_string()];
    for i in 0..6 {
        for t in 0..6 {
            rows.push(format!("{i},{t},{}.0,1.0", i + t));
        }
    }
    let csv = write_file(dir.path(), "flat.csv", &(rows.join("\n") + "\n"));

    let out = run(&[
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--estimator",
        "within_ls",
    ]);
    assert_eq!(exit_code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("subsample"), "stderr: {stderr}");
}

#[test]
fn design_report_feeds_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let report_path = dir.path().join("report.json");

    let out = run(&["design", spec.to_str().unwrap(), "--out", report_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();

    let out = run(&["weights", report_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let resolved = stdout_json(&out);

    let v0: Vec<f64> = serde_json::from_value(report["weights"]["v_star"].clone()).unwrap();
    let v1: Vec<f64> = serde_json::from_value(resolved["weights"]["v_star"].clone()).unwrap();
    assert_eq!(v0.len(), v1.len());
    for (a, b) in v0.iter().zip(&v1) {
        assert!((a - b).abs() < 1e-12, "v* mismatch: {v0:?} vs {v1:?}");
    }
    let u0: Vec<Vec<f64>> = serde_json::from_value(report["weights"]["u_star"].clone()).unwrap();
    let u1: Vec<Vec<f64>> = serde_json::from_value(resolved["weights"]["u_star"].clone()).unwrap();
    assert_eq!(u0.len(), u1.len());
    for (c0, c1) in u0.iter().zip(&u1) {
        for (a, b) in c0.iter().zip(c1) {
            assert!((a - b).abs() < 1e-12, "U* mismatch: {u0:?} vs {u1:?}");
        }
    }
}

#[test]
fn weights_accepts_design_file_directly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let out = run(&["weights", spec.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    let resolved = stdout_json(&out);
    let v: Vec<f64> = serde_json::from_value(resolved["weights"]["v_star"].clone()).unwrap();
    assert!((v[0] - 2.0).abs() < 1e-10);
}

const SMALL_STUDY: &str = r#"{
  "dgp": "dynamic_binary",
  "phi": 0.5,
  "dims": [20, 6],
  "designs": [{"scheme": "ls"}, {"scheme": "a"}],
  "replications": 30,
  "seed": 77
}"#;

/// At T = 4 a time half keeps 2 periods, so the binary regressor sometimes
/// has no within variation on a subsample — a real failure the policies
/// must handle.
const FRAGILE_STUDY: &str = r#"{
  "dgp": "dynamic_binary",
  "phi": 0.5,
  "dims": [12, 4],
  "designs": [{"scheme": "a"}],
  "replications": 30,
  "seed": 77
}"#;

#[test]
fn simulate_failure_policies() {
    let dir = tempfile::tempdir().unwrap();
    let abort = write_file(dir.path(), "abort.json", FRAGILE_STUDY);
    let out = run(&["simulate", abort.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("replication"), "stderr: {stderr}");

    let dropping = write_file(
        dir.path(),
        "drop.json",
        &FRAGILE_STUDY.replace("\"seed\": 77", "\"seed\": 77,\n  \"failure_policy\": \"drop-and-count\""),
    );
    let out = run(&["simulate", dropping.to_str().unwrap(), "--format", "json"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = stdout_json(&out);
    let row = &table["rows"][0];
    let failures = row["failures"].as_u64().unwrap();
    let used = row["used"].as_u64().unwrap();
    assert!(failures >= 1, "expected at least one dropped replication");
    assert_eq!(used + failures, 30);
}

#[test]
fn simulate_same_seed_same_bytes_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_file(dir.path(), "study.json", SMALL_STUDY);
    let out_a = dir.path().join("a.md");
    let out_b = dir.path().join("b.md");
    let out_c = dir.path().join("c.md");

    for (path, workers) in [(&out_a, "1"), (&out_b, "1"), (&out_c, "3")] {
        let out = run(&[
            "simulate",
            config.to_str().unwrap(),
            "--workers",
            workers,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    let c = std::fs::read(&out_c).unwrap();
    assert_eq!(a, b, "same seed, same workers must be byte-identical");
    assert_eq!(a, c, "worker count must not change the table");
    assert!(!a.is_empty());
}

#[test]
fn simulate_seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_file(dir.path(), "study.json", SMALL_STUDY);
    let base = run(&["simulate", config.to_str().unwrap()]);
    let reseeded = run(&["simulate", config.to_str().unwrap(), "--seed", "78"]);
    assert_eq!(exit_code(&base), 0);
    assert_eq!(exit_code(&reseeded), 0);
    assert_ne!(base.stdout, reseeded.stdout);
}

#[test]
fn simulate_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let zero_reps = write_file(
        dir.path(),
        "zero.json",
        &SMALL_STUDY.replace("\"replications\": 30", "\"replications\": 0"),
    );
    let out = run(&["simulate", zero_reps.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);

    let bad_format = write_file(dir.path(), "ok.json", SMALL_STUDY);
    let out = run(&["simulate", bad_format.to_str().unwrap(), "--format", "xml"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn simulate_emits_requested_formats() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_file(dir.path(), "study.json", SMALL_STUDY);

    let md = run(&["simulate", config.to_str().unwrap(), "--format", "md"]);
    assert_eq!(exit_code(&md), 0);
    let md_text = String::from_utf8(md.stdout).unwrap();
    assert!(md_text.starts_with("| design |"), "markdown header: {md_text}");
    assert!(md_text.contains("JK(a)"));

    let csv = run(&["simulate", config.to_str().unwrap(), "--format", "csv"]);
    let csv_text = String::from_utf8(csv.stdout).unwrap();
    assert!(csv_text.starts_with("design,bias,"), "csv header: {csv_text}");

    let json = run(&["simulate", config.to_str().unwrap(), "--format", "json"]);
    let table: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    assert_eq!(table["seed"], serde_json::json!(77));
}

#[test]
fn infer_matches_between_invocations() {
    // Same inputs twice → byte-identical JSON results.
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "design.json", ONEWAY_HALVES);
    let csv = write_file(dir.path(), "panel.csv", &noiseless_csv());
    let args = [
        "infer",
        "--design",
        spec.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--estimator",
        "within_ls",
        "--alpha",
        "0.10",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(exit_code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    // The summary reflects the requested level.
    assert!(String::from_utf8_lossy(&first.stderr).contains("90% CI"));
}

#[test]
fn help_and_bad_usage_exit_codes() {
    let help = run(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("jkpanel"));

    let nothing = run(&[]);
    assert_eq!(exit_code(&nothing), 0, "bare invocation shows help");

    let unknown = run(&["frobnicate"]);
    assert_eq!(exit_code(&unknown), 1);

    let missing_flag = run(&["infer", "--design", "x.json"]);
    assert_eq!(exit_code(&missing_flag), 1);
}
