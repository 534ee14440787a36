//! Parallel-versus-sequential benchmarks for the data-parallel hot loops:
//! corpus rendering, batch waveform encoding, and nearest-neighbor retrieval.
//!
//! `par::map` / `par::argmin_by_key` use rayon when the default `parallel`
//! feature is on; the `*_seq` variants are the single-threaded fallback, so
//! each pair measures the speedup (or, on one core, the overhead).

use criterion::{criterion_group, criterion_main, Criterion};
use revoice_core::synth::{self, DysarthriaTransform, SpeakerProfile};
use revoice_core::{par, phonemes, seeds};

fn render_tasks() -> (Vec<SpeakerProfile>, Vec<Vec<usize>>) {
    let speakers = synth::sample_speakers(8, 2, 7);
    let sentences: Vec<Vec<usize>> = (0..8)
        .map(|i| phonemes::random_sentence(&mut seeds::rng_for(7, "bench-sentence", i), 8))
        .collect();
    (speakers, sentences)
}

fn bench_corpus_render(c: &mut Criterion) {
    let (speakers, sentences) = render_tasks();
    let items: Vec<usize> = (0..8).collect();
    let render = |i: &usize| {
        let out = synth::synthesize(
            &speakers[*i],
            &sentences[*i],
            &DysarthriaTransform::identity(),
            24000,
            1000 + *i as u64,
        );
        out.wav.len()
    };
    let mut g = c.benchmark_group("corpus_render_8_utts");
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| par::map(&items, render).iter().sum::<usize>())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_seq(&items, render).iter().sum::<usize>())
    });
    g.finish();
}

fn bench_nearest_neighbor(c: &mut Criterion) {
    // L1 nearest neighbor in a 64-dim embedding space over 4096 candidates —
    // the shape of the speaker-normalization retrieval scan.
    let mut rng = seeds::rng_for(11, "bench-nn", 0);
    use rand::Rng;
    let pool: Vec<Vec<f64>> = (0..4096)
        .map(|_| (0..64).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let query: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
    let l1 = |_i: usize, cand: &Vec<f64>| -> f64 {
        cand.iter().zip(&query).map(|(a, b)| (a - b).abs()).sum()
    };
    let mut g = c.benchmark_group("retrieval_scan_4096");
    g.bench_function("parallel", |b| b.iter(|| par::argmin_by_key(&pool, l1).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| par::argmin_by_key_seq(&pool, l1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_corpus_render, bench_nearest_neighbor);
criterion_main!(benches);
