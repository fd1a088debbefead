use std::hint::black_box;

use aspectree::fixtures::planted_pool;
use aspectree::scoring::{cross_consistency, curate_indices, self_consistency};
use aspectree::TimestepDistribution;
use aspectree_bench::{embeddings, CLIP_DIM};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn consistency(c: &mut Criterion) {
    let mut group = c.benchmark_group("consistency");
    for n in [10, 40] {
        let a = embeddings(n, CLIP_DIM, 1);
        let b = embeddings(n, CLIP_DIM, 2);
        group.bench_with_input(BenchmarkId::new("self", n), &a, |bench, a| bench.iter(|| self_consistency(black_box(a))));
        group.bench_with_input(BenchmarkId::new("cross", n), &(a.clone(), b), |bench, (a, b)| {
            bench.iter(|| cross_consistency(black_box(a), black_box(b)))
        });
    }
    group.finish();
}

fn curation(c: &mut Criterion) {
    let (pool, _) = planted_pool(CLIP_DIM, 10, 30, 3);
    c.bench_function("curate 40 to 10", |bench| bench.iter(|| curate_indices(black_box(&pool), 10)));
}

fn timesteps(c: &mut Criterion) {
    let dist = TimestepDistribution::new(1000, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("timestep draw", |bench| bench.iter(|| dist.sample(&mut rng)));
}

criterion_group!(benches, consistency, curation, timesteps);
criterion_main!(benches);
