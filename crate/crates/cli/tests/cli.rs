use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pipeline/config.toml")
}

fn visknow(args: &[&str], kb: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visknow"))
        .args(args)
        .arg("--config")
        .arg(config())
        .arg("--kb")
        .arg(kb)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn stage_commands_print_reports_and_map_errors_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let out = visknow(&["align"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = visknow(&["extract", "--seed", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["stage"], "extract");
    assert_eq!(report["seed"], 5);
    assert!(dir.path().join(visknow_core::persistence::META_FILE).exists());

    let out = visknow(&["export-text"], dir.path());
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["stage"], "export-text");

    // a held lock is a constraint violation
    std::fs::write(dir.path().join(".lock"), "other").unwrap();
    let out = visknow(&["export-text"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "kb_dir = \"kb\"\nnot_a_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_visknow"))
        .args(["extract", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_visknow"))
        .args(["serve", "--kb"])
        .arg(dir.path())
        .args(["--token", "t"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0), "serving a directory without a KB");
}
