use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rare_lens::adapter::AdapterParams;
use rare_lens::embeddings::{ClassArtifacts, ClassEmbeddingTable, ProjectionHeads};
use rare_lens::hinting::{score_map, top_k};
use rare_lens::numerics::{Tape, Tensor};
use rare_lens::rng;
use rare_lens::vlm::{TokenSequence, VlmConfig, VlmParams};

fn randn(rows: usize, cols: usize, label: &str) -> Tensor {
    let mut r = rng::stream(0, label);
    Tensor::matrix(rows, cols, rng::gaussian_vec(&mut r, rows * cols, 1.0)).unwrap()
}

fn vlm() -> VlmParams {
    let config = VlmConfig {
        layers: 4,
        heads: 4,
        dim: 64,
        ff_dim: 512,
        context: 256,
        d_v: 32,
        vocab: 128,
    };
    VlmParams::init(config, 0).unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = randn(64, 64, "a");
    let b = randn(64, 512, "b");
    c.bench_function("matmul 64x64x512", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn vlm_forward(c: &mut Criterion) {
    let vlm = vlm();
    let feats = randn(16, 32, "feats");
    let v = vlm.connect(&feats).unwrap();
    let seq = TokenSequence::build(16, 1, &[5, 6, 7, 8, 9, 10, 11, 12], &[13, 2]);
    c.bench_function("vlm forward 16 visual + 11 text", |bench| {
        bench.iter(|| black_box(vlm.forward(Some(&v), &seq).unwrap()))
    });
    let prompt = TokenSequence::build(16, 1, &[5, 6, 7, 8, 9, 10, 11, 12], &[]);
    c.bench_function("vlm generate 4 tokens", |bench| {
        bench.iter(|| black_box(vlm.generate(Some(&v), &prompt, 4, 2).unwrap()))
    });
}

fn adapter(c: &mut Criterion) {
    let mut a = AdapterParams::init(64, 4, 0).unwrap();
    a.wo = randn(64, 64, "wo");
    let v = randn(16, 64, "v");
    let w = randn(12, 64, "w");
    c.bench_function("adapter refine 16 tokens x 12 classes", |bench| {
        bench.iter(|| black_box(a.adapt(&v, &w).unwrap()))
    });
    c.bench_function("adapter tape forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = a.on_tape(&mut tape, true);
            let (vv, wv) = (tape.constant(v.clone()), tape.constant(w.clone()));
            let (r, _) = rare_lens::adapter::adapt_tape(&mut tape, 4, vars, vv, wv).unwrap();
            let l = rare_lens::adapter::rec_loss_tape(&mut tape, vv, r).unwrap();
            black_box(tape.backward(l).unwrap())
        })
    });
}

fn detection(c: &mut Criterion) {
    let names: Vec<String> = (0..12).map(|i| format!("c{i}")).collect();
    let heads = ProjectionHeads::init(32, 32, 64, 0);
    let table = ClassEmbeddingTable::new(randn(12, 64, "table"), names, 0.95).unwrap();
    let artifacts = ClassArtifacts { heads, table };
    let feats = randn(16, 32, "patches");
    c.bench_function("score map + top-3", |bench| {
        bench.iter(|| black_box(top_k(&score_map(&feats, &artifacts).unwrap(), 3).unwrap()))
    });
}

criterion_group!(benches, matmul, vlm_forward, adapter, detection);
criterion_main!(benches);
