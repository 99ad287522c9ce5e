use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SSFT_OUTPUT_ROOT")
        .output()
        .expect("run ssft")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout_dirs(o: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&o.stdout).lines().map(PathBuf::from).collect()
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn minimal() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(config("minimal.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_a_verifiable_artifact() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&["run", config("minimal.json").to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = stdout_dirs(&o);
    assert_eq!(dirs.len(), 1);
    for f in ["manifest.json", "metrics/metrics.csv", "history/history.csv", "reports/summary.json"] {
        assert!(dirs[0].join(f).exists(), "{f}");
    }
    let r = ssft(&["report", dirs[0].to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
}

#[test]
fn missing_phase_b_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = minimal();
    doc.as_object_mut().unwrap().remove("phase_b");
    let cfg = write_json(tmp.path(), "bad.json", &doc);
    let o = ssft(&["run", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("phase_b"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = ssft(&["run", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tampered_artifact_fails_report() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&["run", config("minimal.json").to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    let dir = &stdout_dirs(&o)[0];
    let f = dir.join("metrics/metrics.csv");
    let text = std::fs::read_to_string(&f).unwrap().replace("NEVER", "1");
    std::fs::write(&f, text).unwrap();
    let r = ssft(&["report", dir.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn metrics_subcommand_reproduces_the_table() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&["run", config("minimal.json").to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    let dir = &stdout_dirs(&o)[0];
    let target = out.path().join("recomputed.csv");
    let m = ssft(&[
        "metrics",
        dir.join("history").to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(m.status.code(), Some(0), "{}", String::from_utf8_lossy(&m.stderr));
    assert_eq!(
        std::fs::read(&target).unwrap(),
        std::fs::read(dir.join("metrics/metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_writes_one_cell_per_value() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&[
        "sweep",
        config("minimal.json").to_str().unwrap(),
        "--axis",
        "phase_b.learning_rate",
        "--values",
        "0.01,0.1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &stdout_dirs(&o)[0];
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reports/sweep.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_over_unknown_axis_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&[
        "sweep",
        config("minimal.json").to_str().unwrap(),
        "--axis",
        "phase_b.no_such_field",
        "--values",
        "1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn theory_outside_assumptions_still_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("theory.json")).unwrap()).unwrap();
    doc["asymptotic"]["d"] = serde_json::json!(80);
    doc["asymptotic"]["c"] = serde_json::json!(10.0);
    let cfg = write_json(tmp.path(), "theory.json", &doc);
    let o = ssft(&[
        "theory",
        cfg.to_str().unwrap(),
        "--quick",
        "--trials",
        "2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &stdout_dirs(&o)[0];
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reports/theory.json")).unwrap()).unwrap();
    assert_eq!(report["asymptotic"]["assumptions"]["a3_ok"], serde_json::json!(false));
}

#[test]
fn seed_flag_selects_one_run() {
    let out = tempfile::tempdir().unwrap();
    let o = ssft(&[
        "run",
        config("minimal.json").to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let dirs = stdout_dirs(&o);
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].file_name().unwrap().to_string_lossy().contains("seed5"));
}
