use std::fs;
use std::path::Path;

use lmrl_core::harness::{cmd_eval, cmd_generate, cmd_train, train, Checkpoint, RunConfig};
use lmrl_core::metrics::{EvalReport, VideoOutcome};
use lmrl_core::supervision::{density_gt, foreground_mask};
use lmrl_core::synthgen::{load_manifest, load_split};
use lmrl_core::LmrlError;

fn tiny(dir: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        data_dir: dir.join("data"),
        out_dir: dir.join("run"),
        n_train: 4,
        n_val: 2,
        n_test: 2,
        ..RunConfig::default()
    };
    cfg.gen.seq_len = 32;
    cfg.gen.embed_dim = 6;
    cfg.gen.cycle_len_range = (4, 10);
    cfg.gen.lead_tail_range = (1, 4);
    cfg.gen.interruption_len_range = (2, 6);
    cfg.mpr.mid_channels = 3;
    cfg.mpr.scale_orders = vec![1, 2];
    cfg.rfl.n_blocks = 2;
    cfg.rfl.channels = 6;
    cfg.fusion.fused_dim = 8;
    cfg.fusion.predictor_heads = 2;
    cfg.fusion.ff_mult = 2;
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 2;
    cfg
}

#[test]
fn one_epoch_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    cmd_generate(&cfg).unwrap();
    let outcome = cmd_train(&cfg).unwrap();
    assert_eq!(outcome.log.len(), 2);
    for name in ["config.json", "train_log.csv", "best.ckpt", "last.ckpt"] {
        assert!(cfg.out_dir.join(name).is_file(), "missing {name}");
    }
    let log = fs::read_to_string(cfg.out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_mae,val_obo\n"));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(RunConfig::load(&cfg.out_dir.join("config.json")).unwrap(), cfg);

    let last = Checkpoint::load(&cfg.out_dir.join("last.ckpt")).unwrap();
    assert_eq!(last.epoch, 1);
    assert_eq!(last.config_hash, cfg.hash());

    let out = dir.path().join("eval");
    let report = cmd_eval(&cfg.out_dir.join("best.ckpt"), &cfg.data_dir, "test", &out, true).unwrap();
    assert_eq!(report.per_video.len(), 2);
    assert!(out.join("report.json").is_file());
    let per_video = fs::read_to_string(out.join("per_video.csv")).unwrap();
    assert_eq!(per_video.lines().count(), 3);
    let density = fs::read_to_string(out.join("dumps/test_0000_density.csv")).unwrap();
    assert!(density.starts_with("frame_index,density,gt_density\n"));
    assert_eq!(density.lines().count(), 33);
    assert!(out.join("dumps/test_0001_foreground.csv").is_file());
}

#[test]
fn different_seeds_give_different_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"), 1);
    let b = RunConfig {
        seed: 1,
        ..tiny(&dir.path().join("b"), 1)
    };
    cmd_generate(&a).unwrap();
    cmd_generate(&b).unwrap();
    let la = cmd_train(&a).unwrap().log;
    let lb = cmd_train(&b).unwrap().log;
    assert_ne!(la[1].train_loss, lb[1].train_loss);
}

#[test]
fn training_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 20);
    cfg.n_train = 12;
    cfg.optim.lr = 3e-3;
    cmd_generate(&cfg).unwrap();
    let log = cmd_train(&cfg).unwrap().log;
    let mean = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        log[r].iter().map(|e| e.train_loss).sum::<f64>() / n
    };
    let (early, late) = (mean(1..6), mean(16..21));
    assert!(late < early, "loss went from {early} to {late}");
    assert!(log.iter().all(|e| e.train_loss.is_finite()));
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    let manifest = cmd_generate(&cfg).unwrap();
    let seqs = load_split(&cfg.data_dir, &manifest, "train").unwrap();
    let masks: Vec<Vec<bool>> = seqs
        .iter()
        .map(|s| foreground_mask(&s.annotations, s.len()).unwrap())
        .collect();
    let outcomes: Vec<VideoOutcome<'_>> = seqs
        .iter()
        .zip(&masks)
        .map(|(s, m)| VideoOutcome {
            id: &s.id,
            gt_count: s.annotations.count() as f64,
            pred_count: density_gt(&s.annotations, s.len()).unwrap().count(),
            pred_mask: m,
            gt_mask: m,
        })
        .collect();
    let report = EvalReport::build(&outcomes).unwrap();
    assert!(report.mae < 1e-9);
    assert_eq!(report.obo, 1.0);
    assert_eq!(report.frame_acc, 100.0);
    assert_eq!(report.edit, 100.0);
    assert!(report.f1.values().all(|&f| f == 100.0));
}

#[test]
fn corrupted_manifest_is_a_format_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    cmd_generate(&cfg).unwrap();
    let path = cfg.data_dir.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    match load_manifest(&cfg.data_dir) {
        Err(LmrlError::Format { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn missing_inputs_are_io_errors_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    let err = cmd_train(&cfg).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert!(err.to_string().contains("manifest.json"));

    cmd_generate(&cfg).unwrap();
    let gone = cfg.data_dir.join("val/val_0001.bin");
    fs::remove_file(&gone).unwrap();
    let err = cmd_train(&cfg).unwrap_err();
    assert!(matches!(&err, LmrlError::Io { path, .. } if *path == gone));

    let err = cmd_eval(
        &dir.path().join("nope.ckpt"),
        &cfg.data_dir,
        "test",
        dir.path(),
        false,
    )
    .unwrap_err();
    assert!(err.to_string().contains("nope.ckpt"));
}

#[test]
fn unknown_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    let manifest = cmd_generate(&cfg).unwrap();
    let err = load_split(&cfg.data_dir, &manifest, "holdout").unwrap_err();
    assert_eq!(err.kind(), "data");
}

#[test]
fn mismatched_sequence_shape_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    let manifest = cmd_generate(&cfg).unwrap();
    let seqs = load_split(&cfg.data_dir, &manifest, "train").unwrap();
    let mut other = cfg.clone();
    other.gen.embed_dim = 7;
    let err = train(&other, &seqs, &seqs).map(|_| ()).unwrap_err();
    assert_eq!(err.kind(), "data");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 1);
    cfg.fusion.fused_dim = 7;
    assert_eq!(cmd_train(&cfg).unwrap_err().kind(), "config");
    let mut cfg = tiny(dir.path(), 1);
    cfg.loss.use_den = false;
    cfg.loss.use_loc = false;
    cfg.loss.use_tri = false;
    assert_eq!(cmd_train(&cfg).unwrap_err().kind(), "config");
}
