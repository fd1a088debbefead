//! Synthetic concepts with planted structure, for the mock backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::mock::ConceptSpace;
use crate::embedding::EmbeddingVector;
use crate::image::{ImageRef, ImageSet};

pub const HIERARCHY_DIM: usize = 16;

fn axis(dim: usize, pairs: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &(i, x) in pairs {
        v[i] += x;
    }
    v
}

/// Unit concept vectors of a two-level hierarchy: `x`, and `y1`, `y2` which
/// share a common component (`y`, their mean, is the coarse concept).
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl Hierarchy {
    pub fn new() -> Self {
        let (a, b) = (0.829, 0.559);
        Self {
            x: axis(HIERARCHY_DIM, &[(0, 0.6), (1, 0.8)]),
            y1: axis(HIERARCHY_DIM, &[(0, 0.6), (2, 0.8 * a), (3, 0.8 * b)]),
            y2: axis(HIERARCHY_DIM, &[(0, 0.6), (2, 0.8 * a), (3, -0.8 * b)]),
        }
    }

    /// Centroid of the coarse `y` cluster.
    pub fn y(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y2).map(|(a, b)| (a + b) / 2.0).collect()
    }

    /// Concept space whose generator decodes into the three leaf concepts.
    pub fn space(&self) -> ConceptSpace {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        let mut space = ConceptSpace { dimension: HIERARCHY_DIM, ..ConceptSpace::default() };
        space.concepts.insert("x".into(), f(&self.x));
        space.concepts.insert("y1".into(), f(&self.y1));
        space.concepts.insert("y2".into(), f(&self.y2));
        space
    }

    /// Root set: six images of `x`, three each of `y1` and `y2`.
    pub fn root_images(&self, seed: u64, noise: f64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [&self.x, &self.x, &self.y1, &self.x, &self.y2, &self.x, &self.y1, &self.x, &self.y2, &self.x, &self.y1, &self.y2];
        centers.iter().map(|c| ImageRef::user_vector(jitter(&mut rng, c, noise))).collect()
    }
}

impl Default for Hierarchy {
    fn default() -> Self {
        Self::new()
    }
}

fn jitter(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f32> {
    center.iter().map(|c| (c + noise * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
}

/// Random unit vector.
pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// `per_cluster` noisy images around each centroid, interleaved.
pub fn planted_clusters(centroids: &[Vec<f64>], per_cluster: usize, noise: f64, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for _ in 0..per_cluster {
        for c in centroids {
            images.push(ImageRef::user_vector(jitter(&mut rng, c, noise)));
        }
    }
    ImageSet::new(images)
}

/// Curation pool: `planted` near-duplicates of one direction scattered among
/// `outliers` isotropic vectors. Returns the pool and the planted positions.
pub fn planted_pool(dim: usize, planted: usize, outliers: usize, seed: u64) -> (Vec<EmbeddingVector>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = random_unit(&mut rng, dim);
    let total = planted + outliers;
    let mut positions: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        positions.swap(i, rng.random_range(0..=i));
    }
    let mut chosen: Vec<usize> = positions[..planted].to_vec();
    chosen.sort_unstable();
    let pool = (0..total)
        .map(|i| {
            let v = if chosen.binary_search(&i).is_ok() {
                jitter(&mut rng, &center, 0.05)
            } else {
                random_unit(&mut rng, dim).iter().map(|&x| x as f32).collect()
            };
            EmbeddingVector::new(v).expect("finite")
        })
        .collect();
    (pool, chosen)
}
