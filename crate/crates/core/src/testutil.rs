use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::store::{EmbeddingStore, ItemRecord};

fn uniform(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0
}

/// `n × dim` uniform(-1, 1) rows with ids `id_base..id_base + n`.
pub fn random_store(n: usize, dim: usize, seed: u64, id_base: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| uniform(&mut rng)).collect();
    let recs = (0..n as u64)
        .map(|i| ItemRecord::whole_image(id_base + i, format!("img-{}", id_base + i), "gallery"))
        .collect();
    EmbeddingStore::from_parts(recs, data, dim, false, "test").unwrap()
}

pub fn random_unit_store(n: usize, dim: usize, seed: u64, id_base: u64, encoder: &str) -> EmbeddingStore {
    let raw = random_store(n, dim, seed, id_base);
    let unit = crate::store::normalize_rows(&raw).unwrap();
    EmbeddingStore::from_parts(unit.records().to_vec(), unit.as_slice().to_vec(), dim, true, encoder).unwrap()
}
