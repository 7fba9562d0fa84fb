use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lmrl_bench::fixture;
use lmrl_core::metrics::{edit_score, f1_at};
use lmrl_core::model;
use lmrl_core::mpr;
use lmrl_core::supervision::{foreground_mask, total_loss, LossConfig, Targets};
use lmrl_core::tensorcore::Tape;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for n in [32, 64, 128] {
        let (cfg, store, seq) = fixture(n);
        group.bench_with_input(BenchmarkId::new("model", n), &n, |b, _| {
            b.iter(|| model::predict(&store, black_box(&seq.embeddings), &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("mpr", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let x = tape.constant(seq.embeddings.clone());
                mpr::mpr_forward(&tape, &store, &x, &cfg.mpr).unwrap().p.shape()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (cfg, store, seq) = fixture(64);
    let targets = Targets::from_annotations(&seq.annotations, seq.len()).unwrap();
    let loss_cfg = LossConfig::default();
    c.bench_function("forward_backward/64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let x = tape.constant(seq.embeddings.clone());
            let fwd = model::forward(&tape, &store, &x, &cfg).unwrap();
            let terms = total_loss(
                &fwd.density,
                &fwd.foreground.probs,
                &fwd.mpr.p,
                &targets,
                &[],
                &loss_cfg,
            )
            .unwrap();
            tape.backward(terms.total).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (cfg, store, seq) = fixture(64);
    let pred = model::predict(&store, &seq.embeddings, &cfg).unwrap();
    let gt = foreground_mask(&seq.annotations, seq.len()).unwrap();
    c.bench_function("metrics/edit_f1", |b| {
        b.iter(|| {
            let e = edit_score(black_box(&pred.mask), &gt);
            e + f1_at(&pred.mask, &gt, 50.0)
        })
    });
}

criterion_group!(benches, forward, train_step, metrics);
criterion_main!(benches);
