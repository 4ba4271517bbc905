use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn oaas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oaas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_scenarios_names_every_bundled_run() {
    let o = oaas(&["list-scenarios"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    for want in [
        "availability",
        "dataflow",
        "exactly-once",
        "failsafe",
        "locking",
        "partition",
        "raft",
        "refinement",
        "staleness",
        "strong",
        "throughput",
    ] {
        assert!(
            names.iter().any(|n| n == want),
            "{want} missing from {names:?}"
        );
    }
}

#[test]
fn run_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = oaas(&["run", "locking", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("PASS fifo-lock-order"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "locking");
    assert!(report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));
}

#[test]
fn run_writes_csv_with_frozen_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = oaas(&["run", "throughput", "--out", out, "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let phases = fs::read_to_string(dir.path().join("phases.csv")).unwrap();
    assert_eq!(
        phases.lines().next().unwrap(),
        "scenario,seed,phase,target,offered_rps,achieved_rps,requests,errors,timeouts,\
         error_ratio,p50_ms,p95_ms,p99_ms,max_ms"
    );
    assert!(phases.lines().count() > 1);
    let checks = fs::read_to_string(dir.path().join("checks.csv")).unwrap();
    assert_eq!(
        checks.lines().next().unwrap(),
        "scenario,check,passed,detail"
    );
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = oaas(&[
            "run",
            "partition",
            "--seed",
            "3",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert!(fa.len() >= 2, "report plus histories");
    assert_eq!(fa, fb);
}

#[test]
fn check_exit_code_follows_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(oaas(&["run", "partition", "--out", out]).status.success());
    let history = dir.path().join("history-strong-1.jsonl");
    let o = oaas(&[
        "check",
        history.to_str().unwrap(),
        "--kind",
        "linearizable-lite",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    // A read that starts after a write finished, yet sees the initial state.
    let stale = dir.path().join("stale.jsonl");
    fs::write(
        &stale,
        concat!(
            r#"{"op":"write","key":"k","client":"a","invoke":0,"ack":10,"value":1,"version":[1]}"#,
            "\n",
            r#"{"op":"read","key":"k","client":"b","invoke":20,"ack":30,"value":null,"version":[]}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = oaas(&[
        "check",
        stale.to_str().unwrap(),
        "--kind",
        "linearizable-lite",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn plan_prints_deployment_plans() {
    let o = oaas(&["plan", "tiers", "--topology", "edge_two_clouds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plans: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let counts: Vec<u64> = plans
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["replica_count"].as_u64().unwrap())
        .collect();
    let mut sorted = counts.clone();
    sorted.sort();
    assert_eq!(sorted, vec![2, 3, 4, 5]);
}

#[test]
fn errors_exit_with_two() {
    let o = oaas(&["run", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error"));
    let o = oaas(&["check", "/nonexistent/history.jsonl", "--kind", "ryw"]);
    assert_eq!(o.status.code(), Some(2));
}
