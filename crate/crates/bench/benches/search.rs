use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mlse_core::simsearch::{nearest_naive, pairwise_scores_blocked, pairwise_topk_blocked, DEFAULT_BLOCK};
use mlse_core::{DistanceMetric, EmbeddingMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EmbeddingMatrix::new(rows, dim, data).unwrap()
}

fn argmin(c: &mut Criterion) {
    let mut group = c.benchmark_group("argmin");
    group.sample_size(10);
    for n in [1000, 4000] {
        let q = random(n, 128, 1);
        let m = random(n, 128, 2);
        group.throughput(Throughput::Elements((n * n * 128) as u64));
        for metric in DistanceMetric::ALL {
            group.bench_with_input(BenchmarkId::new(format!("blocked/{metric}"), n), &n, |b, _| {
                b.iter(|| pairwise_scores_blocked(black_box(&q), black_box(&m), metric, DEFAULT_BLOCK).unwrap())
            });
        }
        if n <= 1000 {
            group.bench_with_input(BenchmarkId::new("naive/cosine", n), &n, |b, _| {
                b.iter(|| nearest_naive(black_box(&q), black_box(&m), DistanceMetric::Cosine).unwrap())
            });
        }
    }
    group.finish();
}

fn block_size(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_size");
    group.sample_size(10);
    let q = random(2000, 128, 3);
    let m = random(2000, 128, 4);
    for block in [32, 128, DEFAULT_BLOCK, 1024] {
        group.bench_with_input(BenchmarkId::from_parameter(block), &block, |b, &block| {
            b.iter(|| pairwise_scores_blocked(&q, &m, DistanceMetric::Cosine, block).unwrap())
        });
    }
    group.finish();
}

fn topk(c: &mut Criterion) {
    let q = random(500, 128, 5);
    let m = random(20_000, 128, 6);
    c.bench_function("topk/10", |b| {
        b.iter(|| pairwise_topk_blocked(&q, &m, DistanceMetric::Cosine, 10).unwrap())
    });
}

criterion_group!(benches, argmin, block_size, topk);
criterion_main!(benches);
