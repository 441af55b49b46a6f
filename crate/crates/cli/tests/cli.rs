//! End-to-end checks of the command-line interface: exit codes, file formats,
//! and determinism of emitted artifacts.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsm-cbf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).expect("output file exists")
}

/// The per-row solve time is wall clock and legitimately varies between runs;
/// everything before it must not.
fn strip_solve_ms(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').expect("csv row").0).collect::<Vec<_>>().join("\n")
}

#[test]
fn simulate_writes_trace_with_expected_header() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let res = run(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "t_end=0.05",
        "--set",
        "filter.integrator.max_step=1.0",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let csv = read(&out);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,x1,x2,x3,x4,v1,u1,w1,delta1,deltaT,qp_status,used_fallback,solve_ms"
    );
    // 0.05 s at the 5 ms default tick: rows at k = 0..=10.
    assert_eq!(lines.count(), 11);
    assert!(stdout(&res).contains("fallbacks: 0"));
}

#[test]
fn zero_duration_run_emits_single_row() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let res = run(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "t_end=0",
        "--set",
        "filter.integrator.max_step=1.0",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));
    assert_eq!(read(&out).lines().count(), 2, "header plus the t = 0 row");
}

#[test]
fn start_outside_limits_exits_3() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let res = run(&["simulate", "--out", out.to_str().unwrap(), "--set", "x0.0=4.6"]);
    assert_eq!(res.status.code(), Some(3), "stderr: {}", stderr(&res));
    assert!(stderr(&res).contains("initial margin negative"), "stderr: {}", stderr(&res));
}

#[test]
fn malformed_scenario_reports_position_and_exits_1() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"model\": \"pendulum-cart\", ").unwrap();
    let res = run(&["simulate", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let msg = stderr(&res);
    assert!(msg.contains("line") && msg.contains("column"), "stderr: {msg}");
}

#[test]
fn unknown_model_exits_1() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("odd.json");
    std::fs::write(
        &bad,
        r#"{"model": "hovercraft", "x0": [0], "v0": [0], "kappa_gain": [[1.0]],
           "r": [0], "t_end": 1.0, "control_dt": 0.005,
           "filter": {"T": 1.0, "alpha_path": {"kind": "linear", "gain": 1.0},
                      "eta": 0.1}}"#,
    )
    .unwrap();
    let res = run(&["simulate", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("hovercraft"), "stderr: {}", stderr(&res));
}

#[test]
fn repeated_runs_are_byte_identical_modulo_timings() {
    let dir = tempdir().unwrap();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    let args = |out: &Path| {
        vec![
            "simulate".to_string(),
            "--out".to_string(),
            out.to_str().unwrap().to_string(),
            "--set".to_string(),
            "t_end=0.2".to_string(),
            "--set".to_string(),
            "filter.integrator.max_step=0.5".to_string(),
        ]
    };
    let res_a = bin().args(args(&out_a)).output().unwrap();
    let res_b = bin().args(args(&out_b)).output().unwrap();
    assert!(res_a.status.success() && res_b.status.success());
    // First stdout line names the output file; the rest must agree.
    let tail = |s: &str| s.lines().skip(1).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(tail(&stdout(&res_a)), tail(&stdout(&res_b)));
    assert_eq!(strip_solve_ms(&read(&out_a)), strip_solve_ms(&read(&out_b)));
}

#[test]
fn bundled_scenario_file_matches_builtin_default() {
    let dir = tempdir().unwrap();
    let out_file = dir.path().join("file.csv");
    let out_builtin = dir.path().join("builtin.csv");
    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/pendulum.json");

    let overrides =
        ["--set", "t_end=0.1", "--set", "filter.integrator.max_step=0.5"];
    let res_file = bin()
        .args(["simulate", "--scenario", scenario, "--out", out_file.to_str().unwrap()])
        .args(overrides)
        .output()
        .unwrap();
    let res_builtin = bin()
        .args(["simulate", "--out", out_builtin.to_str().unwrap()])
        .args(overrides)
        .output()
        .unwrap();
    assert!(res_file.status.success(), "stderr: {}", stderr(&res_file));
    assert!(res_builtin.status.success());
    assert_eq!(strip_solve_ms(&read(&out_file)), strip_solve_ms(&read(&out_builtin)));
}

#[test]
fn verify_qp_suite_passes_and_reports() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("report.json");
    let res = run(&["verify", "--suite", "qp", "--seed", "0", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let doc: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    let suite = &doc.as_array().unwrap()[0];
    assert_eq!(suite["suite"], "qp");
    assert_eq!(suite["total"], 1000);
    assert_eq!(suite["passed"], 1000);
    assert!(stdout(&res).contains("1000/1000"));
}

#[test]
fn dump_qp_emits_problem_and_solution() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("qp.json");
    let res = run(&[
        "dump-qp",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "filter.integrator.max_step=0.5",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let doc: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    assert!(!doc["problem"]["rows"].as_array().unwrap().is_empty());
    assert_eq!(doc["problem"]["target_w"].as_array().unwrap().len(), 1);
    assert_eq!(doc["solution"]["status"], "optimal");
    assert_eq!(doc["solution"]["u"].as_array().unwrap().len(), 1);
    assert!(doc["delta1"].as_f64().unwrap() > 0.0, "start margin is interior");
}

#[test]
fn sensitivity_check_emits_full_jacobian_grid() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sens.csv");
    let res = run(&[
        "sensitivity-check",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "filter.integrator.max_step=1.0",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let csv = read(&out);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    // tau, 4 flow components, 16 state-sensitivity entries, 4 reference ones.
    assert_eq!(header.len(), 25);
    assert_eq!(header[0], "tau");
    assert_eq!(header[5], "sx_11");
    assert_eq!(header[24], "sv_41");

    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows.iter().all(|r| r.len() == 25));
    assert_eq!(rows.first().unwrap()[0], 0.0);
    assert_eq!(rows.last().unwrap()[0], 10.0);
}
