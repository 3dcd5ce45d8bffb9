use std::path::Path;
use std::process::{Command, Output};

use rare_lens::harness::{ExperimentConfig, REPORT};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rare-lens"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("cli runs")
}

#[test]
fn subcommands_run_on_a_smoke_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("smoke.json");
    std::fs::write(&config, ExperimentConfig::smoke().to_json()).unwrap();
    let config = config.to_str().unwrap();
    let out = tmp.path().join("run");
    for stage in [
        "gen-data",
        "pretrain-vlm",
        "train-embeddings",
        "train-adapter",
        "eval",
    ] {
        let o = cli(&[stage, "--config", config], &out);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(out.join(REPORT).exists());

    let o = cli(
        &[
            "detect",
            "--config",
            config,
            "--k",
            "2",
            "--mode",
            "hints-only",
        ],
        &out,
    );
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for line in &lines {
        assert_eq!(line["k"], 2);
        assert_eq!(line["mode"], "hints-only");
        assert_eq!(line["hints"].as_array().unwrap().len(), 2);
    }

    let o = cli(
        &["detect", "--config", config, "--scene", "no-such-scene"],
        &out,
    );
    assert_eq!(o.status.code(), Some(2));

    assert!(cli(&["probe", "--config", config], &out).status.success());
    assert!(std::fs::read_dir(out.join("probe")).unwrap().count() > 0);
    assert!(cli(&["sweep", "--config", config], &out).status.success());
    for f in ["sweep.csv", "sweep_k.svg", "sweep_arms.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    let o = cli(&["eval", "--config", missing.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "unknown_field": true}"#).unwrap();
    let o = cli(&["run", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let o = cli(&["no-such-command"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_are_reported_not_panicked() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(&["detect"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
