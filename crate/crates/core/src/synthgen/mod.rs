//! Synthetic repetition sequences standing in for video backbone embeddings.
//!
//! Each sequence traverses a random smooth closed curve (the action template)
//! once per cycle, with per-cycle durations drawn independently, so a slower
//! repetition is the same curve sampled at a lower phase speed. Frames outside
//! cycles (lead-in, tail, and rests between cycles) come from a slowly
//! drifting rest pose.

mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LmrlError, Result};
use crate::seed;
use crate::tensorcore::Tensor;

pub use io::{
    generate_dataset, load_manifest, load_sequence, load_split, read_annotations, read_embeddings,
    write_annotations, write_embeddings, AnnotationFile, Manifest, ManifestEntry, SPLITS,
};

const TEMPLATE_HARMONICS: usize = 2;
const REST_DRIFT: f64 = 0.85;
const REST_JITTER: f64 = 0.05;
const LAYOUT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub cycle_len_range: (usize, usize),
    pub n_cycles_range: (usize, usize),
    pub interruption_prob: f64,
    pub interruption_len_range: (usize, usize),
    pub noise_sigma: f64,
    pub lead_tail_range: (usize, usize),
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seq_len: 64,
            embed_dim: 16,
            cycle_len_range: (8, 24),
            n_cycles_range: (2, 6),
            interruption_prob: 0.5,
            interruption_len_range: (4, 16),
            noise_sigma: 0.1,
            lead_tail_range: (2, 8),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmrlError::Config(m));
        if self.seq_len == 0 || self.embed_dim == 0 {
            return bad("seq_len and embed_dim must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("cycle_len_range", self.cycle_len_range),
            ("n_cycles_range", self.n_cycles_range),
            ("interruption_len_range", self.interruption_len_range),
            ("lead_tail_range", self.lead_tail_range),
        ] {
            if lo > hi {
                return bad(format!("{name} has min {lo} > max {hi}"));
            }
        }
        if self.cycle_len_range.0 == 0 || self.n_cycles_range.0 == 0 {
            return bad("cycles must have positive length and count".into());
        }
        if !(0.0..=1.0).contains(&self.interruption_prob) {
            return bad(format!(
                "interruption_prob {} outside [0, 1]",
                self.interruption_prob
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    fn min_frames(&self, cycles: usize) -> usize {
        2 * self.lead_tail_range.0 + cycles * self.cycle_len_range.0
    }
}

/// Half-open `[start, end)` frame intervals of each annotated repetition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleAnnotations {
    cycles: Vec<(usize, usize)>,
}

impl CycleAnnotations {
    /// Validates ordering, overlap, and range against sequence length `n`.
    pub fn new(cycles: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        let mut prev_end = 0;
        for (i, &(s, e)) in cycles.iter().enumerate() {
            if s >= e {
                return Err(LmrlError::Annotation(format!(
                    "cycle {i} [{s}, {e}) is empty"
                )));
            }
            if e > n {
                return Err(LmrlError::Annotation(format!(
                    "cycle {i} [{s}, {e}) exceeds sequence length {n}"
                )));
            }
            if s < prev_end {
                return Err(LmrlError::Annotation(format!(
                    "cycle {i} [{s}, {e}) overlaps or precedes the previous cycle"
                )));
            }
            prev_end = e;
        }
        Ok(CycleAnnotations { cycles })
    }

    pub fn cycles(&self) -> &[(usize, usize)] {
        &self.cycles
    }

    pub fn count(&self) -> usize {
        self.cycles.len()
    }

    /// True when some consecutive cycles are separated by background frames.
    pub fn has_interruption(&self) -> bool {
        self.cycles.windows(2).any(|w| w[1].0 > w[0].1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    /// `[N×C]`
    pub embeddings: Tensor,
    pub annotations: CycleAnnotations,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Smooth closed curve in embedding space, parameterized by phase in `[0, 1)`.
#[derive(Clone, Debug)]
pub struct ActionTemplate {
    center: Vec<f64>,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl ActionTemplate {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut gauss = |scale: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let center = gauss(1.0);
        let mut cos = Vec::new();
        let mut sin = Vec::new();
        for h in 1..=TEMPLATE_HARMONICS {
            let amp = 1.0 / h as f64;
            cos.push(gauss(amp));
            sin.push(gauss(amp));
        }
        ActionTemplate { center, cos, sin }
    }

    pub fn point(&self, phase: f64) -> Vec<f64> {
        let mut p = self.center.clone();
        for (h, (a, b)) in self.cos.iter().zip(&self.sin).enumerate() {
            let w = 2.0 * std::f64::consts::PI * (h + 1) as f64 * phase;
            let (s, c) = w.sin_cos();
            for (d, v) in p.iter_mut().enumerate() {
                *v += a[d] * c + b[d] * s;
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Background(usize),
    Cycle(usize),
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn plan_layout(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Segment>> {
    let n = cfg.seq_len;
    let (cmin, cmax) = cfg.n_cycles_range;
    if cfg.min_frames(cmin) > n {
        return Err(LmrlError::Generation(format!(
            "{cmin} cycles of at least {} frames plus background margins cannot fit in {n} frames",
            cfg.cycle_len_range.0
        )));
    }
    let fits_max = (cmin..=cmax)
        .rev()
        .find(|&c| cfg.min_frames(c) <= n)
        .unwrap_or(cmin);
    let cycles = draw(rng, (cmin, fits_max));

    // Independent draws first; the constrained fallback only engages when
    // repeated draws overflow the sequence.
    for _ in 0..LAYOUT_ATTEMPTS {
        let lead = draw(rng, cfg.lead_tail_range);
        let mut segs = vec![Segment::Background(lead)];
        let mut used = lead;
        for i in 0..cycles {
            let len = draw(rng, cfg.cycle_len_range);
            segs.push(Segment::Cycle(len));
            used += len;
            if i + 1 < cycles && rng.random::<f64>() < cfg.interruption_prob {
                let gap = draw(rng, cfg.interruption_len_range);
                segs.push(Segment::Background(gap));
                used += gap;
            }
        }
        if used + cfg.lead_tail_range.0 <= n {
            segs.push(Segment::Background(n - used));
            return Ok(segs);
        }
    }

    let budget = n - cfg.lead_tail_range.0;
    let (lmin, lmax) = cfg.lead_tail_range;
    let (lenmin, lenmax) = cfg.cycle_len_range;
    let lead = draw(rng, (lmin, lmax.min(budget - cycles * lenmin).max(lmin)));
    let mut segs = vec![Segment::Background(lead)];
    let mut used = lead;
    for i in 0..cycles {
        let reserve = (cycles - i - 1) * lenmin;
        let room = budget - used - reserve;
        let len = draw(rng, (lenmin, lenmax.min(room)));
        segs.push(Segment::Cycle(len));
        used += len;
        if i + 1 < cycles && rng.random::<f64>() < cfg.interruption_prob {
            let room = budget - used - reserve;
            let (gmin, gmax) = cfg.interruption_len_range;
            if room >= gmin && gmin > 0 {
                let gap = draw(rng, (gmin, gmax.min(room)));
                segs.push(Segment::Background(gap));
                used += gap;
            }
        }
    }
    segs.push(Segment::Background(n - used));
    Ok(segs)
}

/// Generates one sequence together with the template it traverses.
pub fn generate_with_template(
    cfg: &GenConfig,
    seed: u64,
) -> Result<(LabeledSequence, ActionTemplate)> {
    cfg.validate()?;
    let mut layout_rng = seed::stream(seed, "layout", 0);
    let mut shape_rng = seed::stream(seed, "template", 0);
    let mut rest_rng = seed::stream(seed, "rest", 0);
    let mut noise_rng = seed::stream(seed, "noise", 0);

    let segs = plan_layout(cfg, &mut layout_rng)?;
    let template = ActionTemplate::random(cfg.embed_dim, &mut shape_rng);
    let rest_pose: Vec<f64> = (0..cfg.embed_dim)
        .map(|_| StandardNormal.sample(&mut rest_rng))
        .collect();
    let mut drift = vec![0.0; cfg.embed_dim];
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| LmrlError::Config(format!("noise_sigma: {e}")))?;

    let (n, c) = (cfg.seq_len, cfg.embed_dim);
    let mut data = Vec::with_capacity(n * c);
    let mut cycles = Vec::new();
    let mut t = 0;
    for seg in segs {
        match seg {
            Segment::Background(len) => {
                for _ in 0..len {
                    for (d, v) in drift.iter_mut().enumerate() {
                        let jitter: f64 = StandardNormal.sample(&mut rest_rng);
                        *v = REST_DRIFT * *v + REST_JITTER * jitter;
                        data.push(rest_pose[d] + *v);
                    }
                }
                t += len;
            }
            Segment::Cycle(len) => {
                for j in 0..len {
                    data.extend(template.point(j as f64 / len as f64));
                }
                cycles.push((t, t + len));
                t += len;
            }
        }
    }
    debug_assert_eq!(t, n);
    if cfg.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += noise.sample(&mut noise_rng);
        }
    }
    // Values are stored as f32 on disk; round now so in-memory and reloaded
    // sequences agree exactly.
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }

    Ok((
        LabeledSequence {
            id: format!("synthetic-{seed:016x}"),
            embeddings: Tensor::matrix(n, c, data)?,
            annotations: CycleAnnotations::new(cycles, n)?,
        },
        template,
    ))
}

pub fn generate_sequence(cfg: &GenConfig, seed: u64) -> Result<LabeledSequence> {
    generate_with_template(cfg, seed).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(cycles: usize) -> GenConfig {
        GenConfig {
            n_cycles_range: (cycles, cycles),
            interruption_prob: 0.0,
            noise_sigma: 0.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn noiseless_frames_lie_on_template() {
        let cfg = noiseless(3);
        let (seq, template) = generate_with_template(&cfg, 11).unwrap();
        assert_eq!(seq.annotations.count(), 3);
        for &(s, e) in seq.annotations.cycles() {
            let len = e - s;
            for j in 0..len {
                let expect: Vec<f64> = template
                    .point(j as f64 / len as f64)
                    .into_iter()
                    .map(|v| v as f32 as f64)
                    .collect();
                assert_eq!(seq.embeddings.row(s + j), &expect[..]);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = GenConfig::default();
        assert_eq!(
            generate_sequence(&cfg, 3).unwrap(),
            generate_sequence(&cfg, 3).unwrap()
        );
        assert_ne!(
            generate_sequence(&cfg, 3).unwrap(),
            generate_sequence(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn impossible_layout_is_an_error() {
        let cfg = GenConfig {
            n_cycles_range: (10, 12),
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_sequence(&cfg, 0),
            Err(LmrlError::Generation(_))
        ));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = GenConfig {
            cycle_len_range: (9, 3),
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LmrlError::Config(_))));
    }

    #[test]
    fn annotations_validate_ordering() {
        assert!(CycleAnnotations::new(vec![(2, 5), (4, 8)], 10).is_err());
        assert!(CycleAnnotations::new(vec![(2, 2)], 10).is_err());
        assert!(CycleAnnotations::new(vec![(2, 11)], 10).is_err());
        let a = CycleAnnotations::new(vec![(2, 5), (5, 8)], 10).unwrap();
        assert!(!a.has_interruption());
        let b = CycleAnnotations::new(vec![(2, 5), (6, 8)], 10).unwrap();
        assert!(b.has_interruption());
    }

    #[test]
    fn foreground_mean_separates_from_background() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            ..GenConfig::default()
        };
        for s in 0..20 {
            let seq = generate_sequence(&cfg, s).unwrap();
            let n = seq.len();
            let c = cfg.embed_dim;
            let mut fg = vec![0.0; c];
            let mut bg = vec![0.0; c];
            let (mut nf, mut nb) = (0.0, 0.0);
            let mask = {
                let mut m = vec![false; n];
                for &(a, b) in seq.annotations.cycles() {
                    m[a..b].iter_mut().for_each(|v| *v = true);
                }
                m
            };
            for (t, &fg_frame) in mask.iter().enumerate() {
                let (acc, k) = if fg_frame {
                    (&mut fg, &mut nf)
                } else {
                    (&mut bg, &mut nb)
                };
                for (a, v) in acc.iter_mut().zip(seq.embeddings.row(t)) {
                    *a += v;
                }
                *k += 1.0;
            }
            let gap: f64 = fg
                .iter()
                .zip(&bg)
                .map(|(f, b)| (f / nf - b / nb).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(gap > 1e-3, "seed {s}: gap {gap}");
        }
    }
}
