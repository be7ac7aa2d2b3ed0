use std::process::Command;

fn ctk(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctk")).args(args).output().unwrap()
}

#[test]
fn writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ctk(&[
        "width-sweep",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "width_sweep.widths=[8,16]",
        "--override",
        "width_sweep.seeds=2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["seed"], 3);
    let csv = std::fs::read_to_string(out.join("width_sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("width,seed,rel_gap"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn config_file_and_print() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ctk_harness::ExperimentConfig::default_for(ctk_harness::Task::Bound);
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = ctk(&["bound", "--config", path.to_str().unwrap(), "--print-config", "--override", "bound.sigma=0.2"]);
    assert!(o.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["bound"]["sigma"], 0.2);
}

#[test]
fn validation_errors_exit_with_two() {
    let o = ctk(&["bound", "--override", "network.layer_widths=[2,4,3]"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ctk(&["bound", "--override", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ctk(&["bound", "--config", "/nonexistent/c.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ctk(&[
        "bound",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "train.lr=1e9",
        "--override",
        "train.momentum=0.0",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failure"]["stage"], "fit");
}
