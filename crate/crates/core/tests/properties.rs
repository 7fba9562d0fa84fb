use lmrl_core::metrics::{edit_score, f1_at, frame_accuracy, mae_obo, segment_matches, segments};
use lmrl_core::mpr::{interpolation_matrix, similarity_matrix};
use lmrl_core::supervision::{
    density_gt, foreground_mask, loss_loc, loss_triplet, sample_triplets, Triplet,
};
use lmrl_core::synthgen::generate_sequence;
use lmrl_core::tensorcore::{Tape, Tensor};
use lmrl_core::{CycleAnnotations, GenConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn mask(max_len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..max_len)
}

fn mask_pair(max_len: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1..max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

/// Non-overlapping sorted cycles inside `n` frames, built from gap/length pairs.
fn annotations() -> impl Strategy<Value = (CycleAnnotations, usize)> {
    prop::collection::vec((0usize..5, 1usize..12), 1..8).prop_map(|parts| {
        let mut cycles = Vec::new();
        let mut t = 0;
        for (gap, len) in parts {
            t += gap;
            cycles.push((t, t + len));
            t += len;
        }
        let n = t + 3;
        (CycleAnnotations::new(cycles, n).unwrap(), n)
    })
}

fn sim(x: &Tensor, w: &Tensor) -> Tensor {
    let tape = Tape::new();
    similarity_matrix(&tape.constant(x.clone()), &tape.constant(w.clone()))
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_linear_in_w(
        x in matrix(6, 3), w1 in matrix(3, 3), w2 in matrix(3, 3),
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let mix = Tensor::from_fn(&[3, 3], |i| a * w1.data()[i] + b * w2.data()[i]);
        let lhs = sim(&x, &mix);
        let (s1, s2) = (sim(&x, &w1), sim(&x, &w2));
        for i in 0..lhs.len() {
            let rhs = a * s1.data()[i] + b * s2.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn similarity_is_symmetric_for_symmetric_w(x in matrix(7, 4), w in matrix(4, 4)) {
        let sym = Tensor::from_fn(&[4, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            w.at(r, c) + w.at(c, r)
        });
        let s = sim(&x, &sym);
        for i in 0..7 {
            for j in 0..7 {
                prop_assert!((s.at(i, j) - s.at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_rows_are_convex(n in 1usize..80, m in 1usize..40) {
        let a = interpolation_matrix(n, m);
        for t in 0..n {
            prop_assert!(a.row(t).iter().all(|&v| v >= 0.0));
            prop_assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_partition_the_mask(m in mask(60)) {
        let segs = segments(&m);
        let mut rebuilt = Vec::new();
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].2, w[1].1);
            prop_assert_ne!(w[0].0, w[1].0);
        }
        for (label, s, e) in segs {
            prop_assert!(s < e);
            rebuilt.extend(std::iter::repeat_n(label, e - s));
        }
        prop_assert_eq!(rebuilt, m);
    }

    #[test]
    fn identical_masks_score_perfectly(m in mask(60)) {
        prop_assert_eq!(frame_accuracy(&m, &m).unwrap(), 100.0);
        prop_assert_eq!(edit_score(&m, &m), 100.0);
        for tau in [10.0, 25.0, 50.0] {
            prop_assert_eq!(f1_at(&m, &m, tau), 100.0);
        }
    }

    #[test]
    fn frame_accuracy_and_edit_are_symmetric((p, g) in mask_pair(50)) {
        prop_assert_eq!(frame_accuracy(&p, &g).unwrap(), frame_accuracy(&g, &p).unwrap());
        prop_assert!((edit_score(&p, &g) - edit_score(&g, &p)).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded((p, g) in mask_pair(50)) {
        let acc = frame_accuracy(&p, &g).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        let e = edit_score(&p, &g);
        prop_assert!((0.0..=100.0).contains(&e));
        let fg = |m: &[bool]| segments(m).iter().filter(|s| s.0).count();
        for tau in [10.0, 25.0, 50.0] {
            let (tp, fp, fn_) = segment_matches(&p, &g, tau);
            prop_assert_eq!(tp + fp, fg(&p));
            prop_assert_eq!(tp + fn_, fg(&g));
            prop_assert!((0.0..=100.0).contains(&f1_at(&p, &g, tau)));
        }
    }

    #[test]
    fn count_metrics_ignore_video_order(
        pairs in prop::collection::vec((1usize..20, 0.0f64..25.0), 1..30),
        rot in 0usize..30,
    ) {
        let pairs: Vec<(f64, f64)> = pairs.into_iter().map(|(g, p)| (g as f64, p)).collect();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (a, b) = (mae_obo(&pairs).unwrap(), mae_obo(&rotated).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-12);
        prop_assert_eq!(a.1, b.1);
        prop_assert!((0.0..=1.0).contains(&a.1));
    }

    #[test]
    fn mask_covers_exactly_the_cycles((ann, n) in annotations()) {
        let m = foreground_mask(&ann, n).unwrap();
        let covered: usize = ann.cycles().iter().map(|(s, e)| e - s).sum();
        prop_assert_eq!(m.iter().filter(|&&v| v).count(), covered);
        for &(s, e) in ann.cycles() {
            prop_assert!(m[s..e].iter().all(|&v| v));
        }
    }

    #[test]
    fn density_mass_equals_cycle_count((ann, n) in annotations()) {
        let d = density_gt(&ann, n).unwrap();
        prop_assert!((d.count() - ann.count() as f64).abs() < 1e-9);
        let m = foreground_mask(&ann, n).unwrap();
        for (v, inside) in d.values().iter().zip(&m) {
            prop_assert!(*v >= 0.0);
            if !inside {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn triplet_loss_is_translation_invariant(
        x in matrix(10, 3),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
        seed in any::<u64>(),
    ) {
        let m: Vec<bool> = (0..10).map(|t| t % 3 != 0).collect();
        let triplets = sample_triplets(&m, &mut ChaCha8Rng::seed_from_u64(seed), 16);
        let moved = Tensor::from_fn(&[10, 3], |i| x.data()[i] + shift[i % 3]);
        let loss = |t: &Tensor| {
            let tape = Tape::new();
            loss_triplet(&tape.constant(t.clone()), &triplets, 0.5).unwrap().item()
        };
        let (a, b) = (loss(&x), loss(&moved));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sampled_triplets_respect_the_mask(m in mask(40), seed in any::<u64>()) {
        let ts: Vec<Triplet> = sample_triplets(&m, &mut ChaCha8Rng::seed_from_u64(seed), 20);
        let fg = m.iter().filter(|&&v| v).count();
        if fg < 2 || fg == m.len() {
            prop_assert!(ts.is_empty());
        } else {
            prop_assert_eq!(ts.len(), 20);
        }
        for t in ts {
            prop_assert!(m[t.anchor] && m[t.positive] && !m[t.negative]);
            prop_assert_ne!(t.anchor, t.positive);
        }
    }

    #[test]
    fn localization_loss_is_non_negative(
        p in prop::collection::vec(0.0f64..=1.0, 2..40),
        bits in any::<u64>(),
    ) {
        let n = p.len();
        let m: Vec<bool> = (0..n).map(|t| bits >> (t % 64) & 1 == 1).collect();
        let probs = Tensor::from_fn(&[n, 2], |i| if i % 2 == 1 { p[i / 2] } else { 1.0 - p[i / 2] });
        let tape = Tape::new();
        let v = loss_loc(&tape.constant(probs), &m).unwrap().item();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn generated_sequences_are_well_formed(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let cfg = GenConfig { interruption_prob: p, ..GenConfig::default() };
        let s = generate_sequence(&cfg, seed).unwrap();
        prop_assert_eq!(s.embeddings.shape(), &[cfg.seq_len, cfg.embed_dim]);
        prop_assert!(s.embeddings.data().iter().all(|v| v.is_finite()));
        let k = s.annotations.count();
        prop_assert!(k >= 1 && k <= cfg.n_cycles_range.1);
        for &(a, b) in s.annotations.cycles() {
            prop_assert!(b > a && b <= cfg.seq_len);
        }
        prop_assert_eq!(&s, &generate_sequence(&cfg, seed).unwrap());
    }
}
