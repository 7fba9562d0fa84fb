//! Counting and localization metrics, plus an autocorrelation baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LmrlError, Result};
use crate::tensorcore::Tensor;

pub const F1_THRESHOLDS: [u32; 3] = [10, 25, 50];

/// Normalized mean absolute error and off-by-one accuracy over
/// `(gt_count, pred_count)` pairs. Negative predictions count as zero.
pub fn mae_obo(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(LmrlError::Data("no videos to score".into()));
    }
    let mut mae = 0.0;
    let mut obo = 0.0;
    for &(gt, pred) in pairs {
        if !(gt > 0.0) {
            return Err(LmrlError::Data(format!(
                "ground-truth count must be positive, got {gt}"
            )));
        }
        let err = (pred.max(0.0) - gt).abs();
        mae += err / gt;
        if err <= 1.0 {
            obo += 1.0;
        }
    }
    let n = pairs.len() as f64;
    Ok((mae / n, obo / n))
}

/// Percentage of frames whose labels agree.
pub fn frame_accuracy(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LmrlError::Data(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Ok(100.0);
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Maximal runs of equal labels as `(label, start, end)` with `end` exclusive.
pub fn segments(mask: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=mask.len() {
        if t == mask.len() || mask[t] != mask[start] {
            out.push((mask[start], start, t));
            start = t;
        }
    }
    out
}

fn levenshtein(a: &[bool], b: &[bool]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Segmental edit score: normalized Levenshtein similarity of the run-label
/// sequences, in percent.
pub fn edit_score(pred: &[bool], gt: &[bool]) -> f64 {
    let p: Vec<bool> = segments(pred).into_iter().map(|s| s.0).collect();
    let g: Vec<bool> = segments(gt).into_iter().map(|s| s.0).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / denom as f64)
}

/// True positives, false positives and false negatives of foreground
/// segments at IoU threshold `tau_percent`.
///
/// Ground-truth segments are visited in temporal order; each takes the
/// still-unused predicted segment of highest IoU (earliest on ties) and
/// counts as a hit when that IoU reaches the threshold.
pub fn segment_matches(pred: &[bool], gt: &[bool], tau_percent: f64) -> (usize, usize, usize) {
    let fg = |m: &[bool]| -> Vec<(usize, usize)> {
        segments(m)
            .into_iter()
            .filter(|s| s.0)
            .map(|s| (s.1, s.2))
            .collect()
    };
    let (ps, gs) = (fg(pred), fg(gt));
    let mut used = vec![false; ps.len()];
    let mut tp = 0;
    for &(gs_s, gs_e) in &gs {
        let mut best = (0.0, None);
        for (j, &(ps_s, ps_e)) in ps.iter().enumerate() {
            if used[j] {
                continue;
            }
            let inter = ps_e.min(gs_e).saturating_sub(ps_s.max(gs_s));
            let union = ps_e.max(gs_e) - ps_s.min(gs_s);
            let iou = inter as f64 / union as f64;
            if iou > best.0 {
                best = (iou, Some(j));
            }
        }
        if let (iou, Some(j)) = best {
            if iou >= tau_percent / 100.0 {
                used[j] = true;
                tp += 1;
            }
        }
    }
    (tp, ps.len() - tp, gs.len() - tp)
}

/// F1 in percent from match counts; 100 when there is nothing to find.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 100.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

pub fn f1_at(pred: &[bool], gt: &[bool], tau_percent: f64) -> f64 {
    let (tp, fp, fn_) = segment_matches(pred, gt, tau_percent);
    f1_from_counts(tp, fp, fn_)
}

/// Counts repetitions from the first autocorrelation peak of the
/// channel-averaged, mean-centred signal. Returns 0 when no peak at lag ≥ 2
/// exceeds 0.2 normalized autocorrelation.
pub fn autocorr_count(x: &Tensor) -> f64 {
    let Ok((n, c)) = x.dims2() else { return 0.0 };
    if n < 4 {
        return 0.0;
    }
    let mut signal: Vec<f64> = (0..n)
        .map(|t| x.row(t).iter().sum::<f64>() / c as f64)
        .collect();
    let mean = signal.iter().sum::<f64>() / n as f64;
    signal.iter_mut().for_each(|v| *v -= mean);
    let energy: f64 = signal.iter().map(|v| v * v).sum();
    if energy < 1e-12 {
        return 0.0;
    }
    let r: Vec<f64> = (0..n)
        .map(|lag| {
            (0..n - lag)
                .map(|t| signal[t] * signal[t + lag])
                .sum::<f64>()
                / energy
        })
        .collect();
    for lag in 2..n {
        let rises = r[lag] >= r[lag - 1];
        let peaks = lag + 1 == n || r[lag] >= r[lag + 1];
        if rises && peaks && r[lag] > 0.2 {
            return n as f64 / lag as f64;
        }
    }
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

/// Aggregate evaluation of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub obo: f64,
    pub frame_acc: f64,
    pub edit: f64,
    pub f1: BTreeMap<u32, f64>,
    pub per_video: Vec<VideoResult>,
}

/// Per-video inputs to [`EvalReport::build`].
pub struct VideoOutcome<'a> {
    pub id: &'a str,
    pub gt_count: f64,
    pub pred_count: f64,
    pub pred_mask: &'a [bool],
    pub gt_mask: &'a [bool],
}

impl EvalReport {
    /// Frame accuracy is pooled over all frames, edit is averaged over
    /// videos, and F1 pools segment matches over videos.
    pub fn build(videos: &[VideoOutcome<'_>]) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = videos.iter().map(|v| (v.gt_count, v.pred_count)).collect();
        let (mae, obo) = mae_obo(&pairs)?;
        let mut hits = 0usize;
        let mut frames = 0usize;
        let mut edit = 0.0;
        let mut counts = [(0usize, 0usize, 0usize); F1_THRESHOLDS.len()];
        for v in videos {
            frame_accuracy(v.pred_mask, v.gt_mask)?;
            hits += v
                .pred_mask
                .iter()
                .zip(v.gt_mask)
                .filter(|(a, b)| a == b)
                .count();
            frames += v.gt_mask.len();
            edit += edit_score(v.pred_mask, v.gt_mask);
            for (slot, &tau) in counts.iter_mut().zip(&F1_THRESHOLDS) {
                let (tp, fp, fn_) = segment_matches(v.pred_mask, v.gt_mask, tau as f64);
                slot.0 += tp;
                slot.1 += fp;
                slot.2 += fn_;
            }
        }
        let f1 = F1_THRESHOLDS
            .iter()
            .zip(counts)
            .map(|(&tau, (tp, fp, fn_))| (tau, f1_from_counts(tp, fp, fn_)))
            .collect();
        Ok(EvalReport {
            mae,
            obo,
            frame_acc: if frames == 0 {
                100.0
            } else {
                100.0 * hits as f64 / frames as f64
            },
            edit: edit / videos.len() as f64,
            f1,
            per_video: videos
                .iter()
                .map(|v| VideoResult {
                    id: v.id.to_string(),
                    gt_count: v.gt_count,
                    pred_count: v.pred_count,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn per_video_csv(&self) -> String {
        let mut out = String::from("id,gt_count,pred_count\n");
        for v in &self.per_video {
            out.push_str(&format!("{},{},{}\n", v.id, v.gt_count, v.pred_count));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &str) -> Vec<bool> {
        bits.bytes().map(|b| b == b'1').collect()
    }

    #[test]
    fn mae_obo_arithmetic() {
        assert_eq!(mae_obo(&[(4.0, 5.0)]).unwrap(), (0.25, 1.0));
        assert_eq!(mae_obo(&[(3.0, 3.0), (5.0, 5.0)]).unwrap(), (0.0, 1.0));
        assert_eq!(mae_obo(&[(2.0, -1.0)]).unwrap(), (1.0, 0.0));
        assert!(mae_obo(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn frame_accuracy_extremes() {
        assert_eq!(frame_accuracy(&m("0110"), &m("0110")).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&m("0110"), &m("1001")).unwrap(), 0.0);
        assert!(frame_accuracy(&m("01"), &m("011")).is_err());
    }

    #[test]
    fn edit_extremes() {
        assert_eq!(edit_score(&m("0011100"), &m("0011100")), 100.0);
        assert_eq!(edit_score(&m("1111"), &m("0000")), 0.0);
        // [bg fg bg] vs [bg fg bg fg bg]: two insertions over five runs.
        assert!((edit_score(&m("0110000"), &m("0110110")) - 60.0).abs() < 1e-12);
    }

    #[test]
    fn f1_cases() {
        for tau in [10.0, 25.0, 50.0] {
            assert_eq!(f1_at(&m("0011100110"), &m("0011100110"), tau), 100.0);
            assert_eq!(f1_at(&m("1100000000"), &m("0000000011"), tau), 0.0);
            assert_eq!(f1_at(&m("0000"), &m("0000"), tau), 100.0);
        }
        // IoU = 3 / 10
        let pred = m("1111111000");
        let gt = m("0000111111");
        assert_eq!(f1_at(&pred, &gt, 10.0), 100.0);
        assert_eq!(f1_at(&pred, &gt, 25.0), 100.0);
        assert_eq!(f1_at(&pred, &gt, 50.0), 0.0);
    }

    #[test]
    fn autocorr_on_sinusoid_and_constant() {
        let x = Tensor::from_fn(&[64, 1], |t| {
            (2.0 * std::f64::consts::PI * t as f64 / 8.0).sin()
        });
        let count = autocorr_count(&x);
        assert!((count - 8.0).abs() <= 1.0, "{count}");
        assert_eq!(autocorr_count(&Tensor::filled(&[64, 3], 2.0)), 0.0);
    }
}
