use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::fusion::DensityMap;
use crate::metrics::{EvalReport, VideoOutcome};
use crate::model::{self, ModelConfig, Prediction};
use crate::mpr::dump_stack;
use crate::supervision::{density_gt, foreground_mask};
use crate::synthgen::{load_manifest, load_split, LabeledSequence};
use crate::tensorcore::{ParamStore, Tape};

use super::{write_text, Checkpoint};

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    seqs: &[LabeledSequence],
) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut masks = Vec::with_capacity(seqs.len());
    for s in seqs {
        predictions.push(model::predict(store, &s.embeddings, cfg)?);
        masks.push(foreground_mask(&s.annotations, s.len())?);
    }
    let outcomes: Vec<VideoOutcome<'_>> = seqs
        .iter()
        .zip(&predictions)
        .zip(&masks)
        .map(|((s, p), gt)| VideoOutcome {
            id: &s.id,
            gt_count: s.annotations.count() as f64,
            pred_count: p.density.count(),
            pred_mask: &p.mask,
            gt_mask: gt,
        })
        .collect();
    let report = EvalReport::build(&outcomes)?;
    Ok(Evaluation {
        report,
        predictions,
    })
}

/// `frame_index,density,gt_density`
pub fn write_density_csv(path: &Path, pred: &DensityMap, gt: &DensityMap) -> Result<()> {
    let mut out = String::from("frame_index,density,gt_density\n");
    for (t, (p, g)) in pred.values().iter().zip(gt.values()).enumerate() {
        writeln!(out, "{t},{p},{g}").unwrap();
    }
    write_text(path, &out)
}

/// `frame_index,fg_prob,gt_foreground`
pub fn write_foreground_csv(path: &Path, fg_prob: &[f64], gt: &[bool]) -> Result<()> {
    let mut out = String::from("frame_index,fg_prob,gt_foreground\n");
    for (t, (p, g)) in fg_prob.iter().zip(gt).enumerate() {
        writeln!(out, "{t},{p},{}", u8::from(*g)).unwrap();
    }
    write_text(path, &out)
}

/// Evaluates a checkpoint on `split`, writing `report.json` and
/// `per_video.csv` to `out_dir`, plus per-video CSV dumps under
/// `out_dir/dumps` when `dump` is set.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    out_dir: &Path,
    dump: bool,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.restore()?;
    let cfg = ck.config.model();
    let manifest = load_manifest(data_dir)?;
    let seqs = load_split(data_dir, &manifest, split)?;
    let eval = evaluate(&store, &cfg, &seqs)?;
    write_text(&out_dir.join("report.json"), &eval.report.to_json())?;
    write_text(&out_dir.join("per_video.csv"), &eval.report.per_video_csv())?;
    if dump {
        let dir = out_dir.join("dumps");
        for (s, p) in seqs.iter().zip(&eval.predictions) {
            let gt = density_gt(&s.annotations, s.len())?;
            write_density_csv(&dir.join(format!("{}_density.csv", s.id)), &p.density, &gt)?;
            let mask = foreground_mask(&s.annotations, s.len())?;
            write_foreground_csv(
                &dir.join(format!("{}_foreground.csv", s.id)),
                &p.fg_prob,
                &mask,
            )?;
            let tape = Tape::new();
            let x = tape.constant(s.embeddings.clone());
            let fwd = model::forward(&tape, &store, &x, &cfg)?;
            dump_stack(&dir, &s.id, &fwd.mpr)?;
        }
    }
    Ok(eval.report)
}
