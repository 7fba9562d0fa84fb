//! Ground-truth targets, the three training losses, and triplet sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LmrlError, Result};
use crate::fusion::DensityMap;
use crate::synthgen::CycleAnnotations;
use crate::tensorcore::{Tensor, Var};

/// Probability floor applied before taking logs in the localization loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the density MSE inside the counting loss.
    pub alpha: f64,
    pub margin: f64,
    pub max_triplets: usize,
    pub use_loc: bool,
    pub use_tri: bool,
    pub use_den: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            margin: 0.5,
            max_triplets: 32,
            use_loc: true,
            use_tri: true,
            use_den: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.margin >= 0.0) {
            return Err(LmrlError::Config(format!(
                "alpha ({}) and margin ({}) must be non-negative",
                self.alpha, self.margin
            )));
        }
        if !(self.use_loc || self.use_tri || self.use_den) {
            return Err(LmrlError::Config("every loss term is switched off".into()));
        }
        Ok(())
    }
}

/// Per-frame foreground indicator: true inside any annotated cycle.
pub fn foreground_mask(ann: &CycleAnnotations, n: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &(s, e) in ann.cycles() {
        if s >= e || e > n {
            return Err(LmrlError::Annotation(format!(
                "cycle [{s}, {e}) is invalid for a {n}-frame sequence"
            )));
        }
        mask[s..e].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

/// Sum of one unit-mass truncated Gaussian per cycle, centred on the cycle
/// midpoint with σ = length / 6.
pub fn density_gt(ann: &CycleAnnotations, n: usize) -> Result<DensityMap> {
    let mut values = vec![0.0; n];
    for &(s, e) in ann.cycles() {
        if s >= e {
            return Err(LmrlError::Annotation(format!(
                "cycle [{s}, {e}) has zero length"
            )));
        }
        if e > n {
            return Err(LmrlError::Annotation(format!(
                "cycle [{s}, {e}) exceeds sequence length {n}"
            )));
        }
        let center = (s + e - 1) as f64 / 2.0;
        let sigma = (e - s) as f64 / 6.0;
        let bump: Vec<f64> = (s..e)
            .map(|t| (-0.5 * ((t as f64 - center) / sigma).powi(2)).exp())
            .collect();
        let mass: f64 = bump.iter().sum();
        for (t, b) in (s..e).zip(bump) {
            values[t] += b / mass;
        }
    }
    Ok(DensityMap::new(values))
}

/// `|c − ĉ| / ĉ` where `c` is the sum of the predicted density.
pub fn relative_count_error<'t>(density: &Var<'t>, gt_count: f64) -> Result<Var<'t>> {
    if !(gt_count > 0.0) {
        return Err(LmrlError::Supervision(format!(
            "ground-truth count must be positive, got {gt_count}"
        )));
    }
    Ok(density
        .sum()
        .add_scalar(-gt_count)
        .abs()
        .scale(1.0 / gt_count))
}

/// Mean squared difference between predicted and ground-truth density.
pub fn density_mse<'t>(density: &Var<'t>, gt: &DensityMap) -> Result<Var<'t>> {
    let target = density
        .tape()
        .constant(Tensor::new(density.shape(), gt.values().to_vec())?);
    Ok(density.sub(&target)?.square()?.mean())
}

/// `|c − ĉ|/ĉ + α · (1/N) Σ (y_j − ŷ_j)²`.
pub fn loss_count<'t>(
    density: &Var<'t>,
    gt: &DensityMap,
    gt_count: f64,
    alpha: f64,
) -> Result<Var<'t>> {
    let rel = relative_count_error(density, gt_count)?;
    let mse = density_mse(density, gt)?;
    rel.add(&mse.scale(alpha))
}

/// Cross-entropy on the ground-truth class averaged over frames, plus
/// `1/(2N)` times the squared frame-to-frame change of both class
/// probabilities.
pub fn loss_loc<'t>(probs: &Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != mask.len() {
        return Err(LmrlError::Shape {
            op: "loss_loc",
            lhs: shape,
            rhs: vec![mask.len(), 2],
        });
    }
    let n = mask.len();
    let tape = probs.tape();
    let onehot = Tensor::from_fn(&[n, 2], |i| {
        let (t, c) = (i / 2, i % 2);
        if (c == 1) == mask[t] {
            1.0
        } else {
            0.0
        }
    });
    let picked = probs
        .log_clamped(PROB_FLOOR)
        .mul(&tape.constant(onehot))?
        .sum()
        .scale(-1.0 / n as f64);
    if n < 2 {
        return Ok(picked);
    }
    let prev: Vec<usize> = (0..n - 1).collect();
    let next: Vec<usize> = (1..n).collect();
    let smooth = probs
        .gather_rows(&prev)?
        .sub(&probs.gather_rows(&next)?)?
        .square()?
        .sum()
        .scale(1.0 / (2.0 * n as f64));
    picked.add(&smooth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Up to `max_triplets` random (foreground, foreground, background) frame
/// triples; empty when the mask has fewer than two foreground frames or no
/// background frame.
pub fn sample_triplets<R: Rng>(mask: &[bool], rng: &mut R, max_triplets: usize) -> Vec<Triplet> {
    let fg: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&t| !mask[t]).collect();
    if fg.len() < 2 || bg.is_empty() {
        return Vec::new();
    }
    (0..max_triplets)
        .map(|_| {
            let a = rng.random_range(0..fg.len());
            let mut p = rng.random_range(0..fg.len() - 1);
            if p >= a {
                p += 1;
            }
            Triplet {
                anchor: fg[a],
                positive: fg[p],
                negative: bg[rng.random_range(0..bg.len())],
            }
        })
        .collect()
}

/// Mean hinge `max(d(a,p) − d(a,n) + margin, 0)` over triplets, with L2 `d`.
pub fn loss_triplet<'t>(emb: &Var<'t>, triplets: &[Triplet], margin: f64) -> Result<Var<'t>> {
    if triplets.is_empty() {
        return Ok(emb.tape().constant(Tensor::scalar(0.0)));
    }
    let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { triplets.iter().map(f).collect() };
    let a = emb.gather_rows(&pick(|t| t.anchor))?;
    let p = emb.gather_rows(&pick(|t| t.positive))?;
    let n = emb.gather_rows(&pick(|t| t.negative))?;
    let dist =
        |x: &Var<'t>, y: &Var<'t>| -> Result<Var<'t>> { Ok(x.sub(y)?.square()?.row_sum()?.sqrt()) };
    let d_ap = dist(&a, &p)?;
    let d_an = dist(&a, &n)?;
    Ok(d_ap.sub(&d_an)?.add_scalar(margin).relu().mean())
}

/// Per-sequence supervision derived from annotations.
#[derive(Clone, Debug)]
pub struct Targets {
    pub mask: Vec<bool>,
    pub density: DensityMap,
    pub count: f64,
}

impl Targets {
    pub fn from_annotations(ann: &CycleAnnotations, n: usize) -> Result<Self> {
        Ok(Targets {
            mask: foreground_mask(ann, n)?,
            density: density_gt(ann, n)?,
            count: ann.count() as f64,
        })
    }
}

/// Enabled loss terms and their sum.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub count: Option<Var<'t>>,
    pub loc: Option<Var<'t>>,
    pub tri: Option<Var<'t>>,
}

/// Sums the switched-on terms with unit weights.
///
/// The relative count error is always supervised; the density switch
/// controls the α-weighted density MSE.
pub fn total_loss<'t>(
    density: &Var<'t>,
    probs: &Var<'t>,
    embedding: &Var<'t>,
    targets: &Targets,
    triplets: &[Triplet],
    cfg: &LossConfig,
) -> Result<LossTerms<'t>> {
    cfg.validate()?;
    let count = if cfg.use_den {
        loss_count(density, &targets.density, targets.count, cfg.alpha)?
    } else {
        relative_count_error(density, targets.count)?
    };
    let loc = if cfg.use_loc {
        Some(loss_loc(probs, &targets.mask)?)
    } else {
        None
    };
    let tri = if cfg.use_tri {
        Some(loss_triplet(embedding, triplets, cfg.margin)?)
    } else {
        None
    };
    let mut total = count;
    for term in [loc, tri].into_iter().flatten() {
        total = total.add(&term)?;
    }
    Ok(LossTerms {
        total,
        count: Some(count),
        loc,
        tri,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ann(cycles: &[(usize, usize)], n: usize) -> CycleAnnotations {
        CycleAnnotations::new(cycles.to_vec(), n).unwrap()
    }

    #[test]
    fn mask_rule() {
        let m = foreground_mask(&ann(&[(2, 5), (7, 9)], 12), 12).unwrap();
        let bits: Vec<u8> = m.iter().map(|&b| b as u8).collect();
        assert_eq!(bits, [0, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0]);
        assert!(foreground_mask(&ann(&[], 5), 5).unwrap().iter().all(|b| !b));
        assert!(foreground_mask(&ann(&[(0, 5)], 5), 5)
            .unwrap()
            .iter()
            .all(|&b| b));
        assert!(foreground_mask(&ann(&[(0, 5)], 5), 4).is_err());
    }

    #[test]
    fn density_mass_and_shape() {
        let d = density_gt(&ann(&[(0, 8), (10, 13), (20, 40)], 40), 40).unwrap();
        assert!((d.count() - 3.0).abs() < 1e-9);
        let one = density_gt(&ann(&[(5, 6)], 10), 10).unwrap();
        assert_eq!(one.values()[5], 1.0);
        assert_eq!(one.values().iter().sum::<f64>(), 1.0);
        let sym = density_gt(&ann(&[(0, 8)], 8), 8).unwrap();
        for t in 0..8 {
            assert!((sym.values()[t] - sym.values()[7 - t]).abs() < 1e-15);
        }
    }

    #[test]
    fn count_loss_arithmetic() {
        let tape = Tape::new();
        let d = tape.input(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let gt = DensityMap::new(vec![1.0, 1.0, 1.0]);
        assert_eq!(loss_count(&d, &gt, 3.0, 1.0).unwrap().item(), 0.0);
        assert_eq!(relative_count_error(&d, 4.0).unwrap().item(), 0.25);
        assert_eq!(loss_count(&d, &gt, 4.0, 0.0).unwrap().item(), 0.25);
        assert!(matches!(
            loss_count(&d, &gt, 0.0, 1.0),
            Err(LmrlError::Supervision(_))
        ));
    }

    #[test]
    fn loc_loss_identities() {
        let tape = Tape::new();
        let mask = [true, true, false, true];
        let perfect = Tensor::from_fn(&[4, 2], |i| {
            if (i % 2 == 1) == mask[i / 2] {
                1.0
            } else {
                0.0
            }
        });
        // Perfect probabilities still change between frames, so only a
        // constant mask gives exactly zero.
        let all_fg = Tensor::from_fn(&[4, 2], |i| (i % 2) as f64);
        assert_eq!(
            loss_loc(&tape.constant(all_fg), &[true; 4]).unwrap().item(),
            0.0
        );
        assert!(loss_loc(&tape.constant(perfect), &mask).unwrap().item() > 0.0);
        let uniform = tape.constant(Tensor::filled(&[4, 2], 0.5));
        let v = loss_loc(&uniform, &mask).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn triplet_sampling_degenerate_and_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplets(&[true; 5], &mut rng, 8).is_empty());
        assert!(sample_triplets(&[true, false, false], &mut rng, 8).is_empty());
        let t = sample_triplets(&[true, false, true], &mut rng, 16);
        assert_eq!(t.len(), 16);
        for tr in t {
            assert_eq!(tr.negative, 1);
            assert!(matches!((tr.anchor, tr.positive), (0, 2) | (2, 0)));
        }
    }

    #[test]
    fn triplet_loss_identities() {
        let tape = Tape::new();
        let trip = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        let same = tape.constant(Tensor::filled(&[3, 2], 0.7));
        assert!((loss_triplet(&same, &trip, 0.5).unwrap().item() - 0.5).abs() < 1e-15);
        let ok = tape.constant(
            Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        );
        assert_eq!(loss_triplet(&ok, &trip, 0.5).unwrap().item(), 0.0);
        assert_eq!(loss_triplet(&ok, &[], 0.5).unwrap().item(), 0.0);
    }

    #[test]
    fn all_switches_off_is_config_error() {
        let cfg = LossConfig {
            use_loc: false,
            use_tri: false,
            use_den: false,
            ..LossConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LmrlError::Config(_))));
    }
}
