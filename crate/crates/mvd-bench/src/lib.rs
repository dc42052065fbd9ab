//! Shared fixtures for the benchmarks.

use mvd_core::index::{Backend, IndexConfig, IndexRecord, ViewIndex, ViewKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds an index of `n_views` random vectors spread over `n_views / 5`
/// entities.
pub fn random_index(seed: u64, n_views: usize, dim: usize, backend: Backend) -> ViewIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_entities = (n_views / 5).max(1);
    let entity_ids: Vec<String> = (0..n_entities).map(|i| format!("e{i}")).collect();
    let mut per_entity = vec![0u16; n_entities];
    let records: Vec<IndexRecord> = (0..n_views)
        .map(|i| {
            let ord = if i < n_entities {
                i
            } else {
                rng.random_range(0..n_entities)
            };
            let rec = IndexRecord {
                entity_ord: ord as u32,
                view_ord: per_entity[ord],
                kind: ViewKind::Local,
                vector: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            };
            per_entity[ord] += 1;
            rec
        })
        .collect();
    ViewIndex::from_records(dim, entity_ids, records, backend, IndexConfig::default()).unwrap()
}

pub fn random_queries(seed: u64, count: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}
