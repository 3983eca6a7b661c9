use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
participants = 4
rounds = 3
batch_size = 8
pretrain_steps = 2
seed = 11

[data]
source = "synthetic"
samples = 200
test_samples = 40
features = 6
classes = 3
"#;

fn auditfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auditfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn run_tiny(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let config = tiny_config(dir);
    let out = dir.join(out);
    let mut args = vec!["run", "--config", s(&config), "--output", s(&out)];
    args.extend_from_slice(extra);
    let o = auditfl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn run_then_audit_accepts_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(
        dir.path(),
        "out",
        &["--malicious", "2:label_flip", "--baseline"],
    );
    let ledger = out.join("ledger.bin");
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("baseline_metrics.csv").exists());

    let o = auditfl(&["audit", s(&ledger)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let report = std::fs::read_to_string(out.join("ledger.bin.audit.json")).unwrap();
    assert!(report.contains("\"verdict\": \"accept\""), "{report}");

    let o = auditfl(&["verify-chain", s(&ledger)]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn byte_flip_is_rejected_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = run_tiny(dir.path(), "out", &[]).join("ledger.bin");
    let mut bytes = std::fs::read(&ledger).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ledger, bytes).unwrap();

    let o = auditfl(&["audit", s(&ledger)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reject"));
    assert_eq!(
        auditfl(&["verify-chain", s(&ledger)]).status.code(),
        Some(1)
    );
}

#[test]
fn audit_in_another_process_matches_in_process_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = run_tiny(dir.path(), "out", &[]).join("ledger.bin");
    let copy = dir.path().join("copy.bin");
    std::fs::copy(&ledger, &copy).unwrap();
    let report = dir.path().join("report.json");
    let o = auditfl(&["audit", s(&copy), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0));

    let in_process = auditfl_core::full_audit(&ledger);
    assert!(in_process.accepted());
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        in_process.to_json()
    );
}

#[test]
fn missing_or_garbage_ledger_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    assert_eq!(auditfl(&["audit", s(&missing)]).status.code(), Some(2));
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a ledger").unwrap();
    let o = auditfl(&["audit", s(&garbage)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stdout.is_empty());
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_tiny(dir.path(), "a", &["--malicious", "1:sign_flip"]);
    let b = run_tiny(dir.path(), "b", &["--malicious", "1:sign_flip"]);
    for f in ["ledger.bin", "metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = run_tiny(
        dir.path(),
        "c",
        &["--malicious", "1:sign_flip", "--seed", "12"],
    );
    assert_ne!(
        std::fs::read(a.join("ledger.bin")).unwrap(),
        std::fs::read(c.join("ledger.bin")).unwrap()
    );
}

#[test]
fn metrics_csv_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "out", &[]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("round,train_loss,test_accuracy,benign_count")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn sweep_writes_table_and_rejects_empty_range() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let o = auditfl(&[
        "sweep",
        "--config",
        s(&config),
        "--output",
        s(&out),
        "--from",
        "0",
        "--to",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "malicious,scheme_accuracy,fedavg_accuracy,error");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));

    let o = auditfl(&[
        "sweep",
        "--config",
        s(&config),
        "--output",
        s(&out),
        "--from",
        "3",
        "--to",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn invalid_flags_fail_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = auditfl(&[
        "run",
        "--config",
        s(&config),
        "--output",
        s(&out),
        "--malicious",
        "9:label_flip",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("ledger.bin").exists());
    let o = auditfl(&["run", "--config", s(&config), "--malicious", "2:bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = auditfl(&["run", "--config", s(&config), "--learning-rate", "0.3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_config_round_trips_through_toml() {
    let o = auditfl(&["default-config", "--desk"]);
    assert!(o.status.success());
    let parsed: auditfl_core::RunConfig =
        toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(parsed, auditfl_core::RunConfig::desk());
}
