//! Fixtures shared by the benchmarks.

use aspectree::fixtures::random_unit;
use aspectree::EmbeddingVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Image-embedding width of the common CLIP models.
pub const CLIP_DIM: usize = 768;

/// `n` random unit embeddings of width `dim`.
pub fn embeddings(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| EmbeddingVector::from_f64(&random_unit(&mut rng, dim)).expect("finite")).collect()
}
