use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sitecast::{PipelineConfig, TrainingConfig};

fn sitecast(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sitecast")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "sitecast {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scenario");
    sitecast(&[
        "gen-synthetic",
        "--out",
        arg(&data),
        "--cells-per-archetype",
        "4",
        "--days",
        "7",
        "--seed",
        "5",
    ]);
    let generated = data.join("config.toml");
    assert!(generated.exists());

    let mut cfg = PipelineConfig::load(&generated).unwrap();
    assert_eq!(cfg.backbone, "toy");
    cfg.clustering.k_max = 5;
    cfg.training = TrainingConfig {
        hidden_size: 8,
        epochs: 2,
        window_stride: 8,
        ..TrainingConfig::default()
    };
    let config = dir.path().join("quick.toml");
    fs::write(&config, cfg.to_toml().unwrap()).unwrap();

    let run = String::from_utf8(sitecast(&["run", "--config", arg(&config)]).stdout).unwrap();
    let run_id = cfg.run_id().unwrap();
    assert!(run.contains(&run_id), "{run}");
    assert!(cfg.output_dir.join(&run_id).join("run.json").exists());

    let report = String::from_utf8(sitecast(&["report", "--config", arg(&config)]).stdout).unwrap();
    let summary = fs::read_to_string(cfg.output_dir.join(&run_id).join("metrics/summary.txt")).unwrap();
    assert_eq!(report, summary);
    assert!(!report.is_empty());
}

#[test]
fn report_without_a_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scenario");
    sitecast(&["gen-synthetic", "--out", arg(&data), "--cells-per-archetype", "2", "--days", "7"]);
    let out = Command::new(env!("CARGO_BIN_EXE_sitecast"))
        .args(["report", "--config", arg(&data.join("config.toml"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
