//! Query latency: exact full scan vs the proximity graph across index sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use mvd_bench::{random_index, random_queries};
use mvd_core::index::Backend;

fn bench_search(c: &mut Criterion) {
    let dim = 16;
    let queries = random_queries(7, 64, dim);

    let mut group = c.benchmark_group("search");
    for &n_views in &[1_000usize, 4_000, 16_000] {
        group.throughput(Throughput::Elements(1));
        let index = random_index(42, n_views, dim, Backend::Approximate);

        group.bench_with_input(BenchmarkId::new("exact", n_views), &index, |b, idx| {
            let mut i = 0;
            b.iter(|| {
                let q = &queries[i % queries.len()];
                i += 1;
                black_box(idx.search_exact(q, 64).unwrap())
            });
        });
        group.bench_with_input(BenchmarkId::new("approx", n_views), &index, |b, idx| {
            let mut i = 0;
            b.iter(|| {
                let q = &queries[i % queries.len()];
                i += 1;
                black_box(idx.search_approx(q, 64, 256).unwrap())
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_search);
criterion_main!(benches);
