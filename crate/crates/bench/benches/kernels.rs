use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use saeaudit::audit::average_precision;
use saeaudit::gpt::Mode;
use saeaudit_bench::*;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bch, _| {
            bch.iter(|| matmul_step(black_box(&a), black_box(&b), false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bch, _| {
            bch.iter(|| matmul_step(black_box(&a), black_box(&b), true).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for seq in [64, 256] {
        let inp = attention_input(seq, 64, 4, 3);
        group.bench_with_input(BenchmarkId::from_parameter(seq), &seq, |bch, _| {
            bch.iter(|| attention_forward(black_box(&inp)).unwrap())
        });
    }
    group.finish();

    let model = toy_gpt().unwrap();
    let ids: Vec<u32> = (0..64).map(|i| (i * 37 % 1000) as u32).collect();
    c.bench_function("gpt_forward_64_tokens", |bch| {
        bch.iter(|| model.forward(black_box(&ids), Mode::Eval, false).unwrap())
    });
}

fn sae_encode(c: &mut Criterion) {
    let sae = toy_sae(64, 192, 8).unwrap();
    let x = matrix(256, 64, 4);
    c.bench_function("sae_encode_256x64_to_192_k8", |bch| {
        bch.iter(|| sae.encode_batch(black_box(&x)).unwrap())
    });
}

fn ap(c: &mut Criterion) {
    let mut group = c.benchmark_group("average_precision");
    for n in [665, 10_000] {
        let (scores, labels) = ap_instance(n, 0.1, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| average_precision(black_box(&scores), black_box(&labels)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, sae_encode, ap);
criterion_main!(benches);
