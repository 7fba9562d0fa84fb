use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{LmrlError, Result};
use crate::metrics::EvalReport;
use crate::model::{self, ModelConfig};
use crate::seed::stream;
use crate::supervision::{sample_triplets, total_loss, Targets};
use crate::synthgen::{load_manifest, load_split, LabeledSequence};
use crate::tensorcore::{Adam, Gradients, ParamStore, Tape};

use super::{evaluate, write_text, Checkpoint, RunConfig};

/// One row of `train_log.csv`. Epoch 0 scores the initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_obo: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mae,val_obo\n");
        for r in &self.log {
            writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.train_loss, r.val_mae, r.val_obo
            )
            .unwrap();
        }
        out
    }
}

fn triplet_index(epoch: usize, seq: usize) -> u64 {
    ((epoch as u64) << 32) | seq as u64
}

fn sequence_loss(
    store: &ParamStore,
    model: &ModelConfig,
    cfg: &RunConfig,
    seq: &LabeledSequence,
    targets: &Targets,
    epoch: usize,
    index: usize,
) -> Result<(f64, Option<Gradients>)> {
    let mut rng = stream(cfg.seed, "triplets", triplet_index(epoch, index));
    let triplets = sample_triplets(&targets.mask, &mut rng, cfg.loss.max_triplets);
    let tape = Tape::new();
    let x = tape.constant(seq.embeddings.clone());
    let fwd = model::forward(&tape, store, &x, model)?;
    let terms = total_loss(
        &fwd.density,
        &fwd.foreground.probs,
        &fwd.mpr.p,
        targets,
        &triplets,
        &cfg.loss,
    )?;
    let value = terms.total.item();
    if epoch == 0 {
        return Ok((value, None));
    }
    Ok((value, Some(tape.backward(terms.total)?)))
}

fn metrics_map(report: &EvalReport, train_loss: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("train_loss".to_string(), train_loss),
        ("val_mae".to_string(), report.mae),
        ("val_obo".to_string(), report.obo),
    ])
}

/// Mini-batch Adam training. Batch gradients are the mean of per-sequence
/// gradients; the best checkpoint is the epoch with the lowest val MAE.
pub fn train(
    cfg: &RunConfig,
    train_set: &[LabeledSequence],
    val_set: &[LabeledSequence],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(LmrlError::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let model = cfg.model();
    let n = cfg.gen.seq_len;
    let c = cfg.gen.embed_dim;
    for s in train_set.iter().chain(val_set) {
        if s.embeddings.shape() != [n, c] {
            return Err(LmrlError::Data(format!(
                "sequence {} has shape {:?}, config expects [{n}, {c}]",
                s.id,
                s.embeddings.shape()
            )));
        }
    }
    let mut store = model.build(n, c, cfg.init_seed())?;
    let targets = train_set
        .iter()
        .map(|s| Targets::from_annotations(&s.annotations, n))
        .collect::<Result<Vec<_>>>()?;
    let o = &cfg.optim;
    let mut adam = Adam::new(o.lr, o.betas, o.eps);

    let mut log = Vec::with_capacity(o.epochs + 1);
    let mut epoch_loss = 0.0;
    for (i, (s, t)) in train_set.iter().zip(&targets).enumerate() {
        epoch_loss += sequence_loss(&store, &model, cfg, s, t, 0, i)?.0;
    }
    let report = evaluate(&store, &model, val_set)?.report;
    let mut train_loss = epoch_loss / train_set.len() as f64;
    log.push(EpochLog {
        epoch: 0,
        train_loss,
        val_mae: report.mae,
        val_obo: report.obo,
    });
    let mut best = Checkpoint::capture(cfg, 0, metrics_map(&report, train_loss), &store);
    let mut best_mae = report.mae;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=o.epochs {
        order.shuffle(&mut stream(cfg.seed, "batching", epoch as u64));
        epoch_loss = 0.0;
        for (step, batch) in order.chunks(o.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (value, grads) =
                    sequence_loss(&store, &model, cfg, &train_set[i], &targets[i], epoch, i)?;
                if !value.is_finite() {
                    return Err(LmrlError::Training(format!(
                        "non-finite loss at epoch {epoch} step {step} (sequence {})",
                        train_set[i].id
                    )));
                }
                epoch_loss += value;
                store.accumulate(&grads.expect("gradients after epoch 0"), scale);
            }
            adam.step(&mut store)
                .map_err(|e| LmrlError::Training(format!("epoch {epoch} step {step}: {e}")))?;
        }
        let report = evaluate(&store, &model, val_set)?.report;
        train_loss = epoch_loss / train_set.len() as f64;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mae: report.mae,
            val_obo: report.obo,
        });
        if report.mae < best_mae {
            best_mae = report.mae;
            best = Checkpoint::capture(cfg, epoch, metrics_map(&report, train_loss), &store);
        }
    }
    let last_metrics = BTreeMap::from([
        ("train_loss".to_string(), train_loss),
        ("val_mae".to_string(), log.last().unwrap().val_mae),
        ("val_obo".to_string(), log.last().unwrap().val_obo),
    ]);
    let last = Checkpoint::capture(cfg, o.epochs, last_metrics, &store);
    Ok(TrainOutcome { log, best, last })
}

/// Trains on the dataset at `cfg.data_dir`, writing `config.json`,
/// `train_log.csv`, `best.ckpt` and `last.ckpt` to `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data_dir)?;
    let train_set = load_split(&cfg.data_dir, &manifest, "train")?;
    let val_set = load_split(&cfg.data_dir, &manifest, "val")?;
    let outcome = train(cfg, &train_set, &val_set)?;
    let out = &cfg.out_dir;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    write_text(&out.join("train_log.csv"), &outcome.log_csv())?;
    outcome.best.save(&out.join("best.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    Ok(outcome)
}
