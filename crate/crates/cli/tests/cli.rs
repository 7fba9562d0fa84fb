use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmrl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmrl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

const SMALL: &str = r#"{
  "n_train": 3, "n_val": 2, "n_test": 2,
  "gen": { "seq_len": 24, "embed_dim": 4, "cycle_len_range": [4, 8], "lead_tail_range": [1, 3],
           "interruption_len_range": [2, 4] },
  "mpr": { "scale_orders": [1, 2], "mid_channels": 2 },
  "rfl": { "n_blocks": 2, "channels": 4 },
  "fusion": { "fused_dim": 4, "predictor_heads": 2, "ff_mult": 2 },
  "optim": { "epochs": 1, "batch_size": 2 }
}"#;

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();

    let out = lmrl(&["--config", "cfg.json", "generate", "--out", "data"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("data/manifest.json").is_file());
    assert!(d.join("data/test/test_0001.bin").is_file());

    let out = lmrl(
        &["--config", "cfg.json", "--out", "run", "train", "--data", "data"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/best.ckpt").is_file());

    let out = lmrl(
        &["--out", "eval", "eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--dump"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert!(printed["mae"].is_number());
    assert!(d.join("eval/dumps/test_0000_density.csv").is_file());
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmrl(&["ablate", "--suite", "nonsense"], dir.path());
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("nonsense"));
}

#[test]
fn missing_checkpoint_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmrl(&["eval", "--checkpoint", "absent.ckpt"], dir.path());
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("absent.ckpt"));
}

#[test]
fn bad_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmrl(&["train", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn malformed_config_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = lmrl(&["--config", "bad.json", "generate"], dir.path());
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "format");
}

#[test]
fn help_goes_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmrl(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["generate", "train", "eval", "ablate"] {
        assert!(text.contains(cmd));
    }
}
