//! Set-consistency scoring, seed selection, curation and the stopping rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::BuildConfig;
use crate::embedding::EmbeddingVector;
use crate::image::ImageSet;
use crate::report::{CandidatePair, ConsistencyReport, StopDecision};

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("image set is empty")]
    EmptySet,
    #[error("self-consistency needs at least 2 images, got {0}")]
    Singleton(usize),
    #[error("embeddings have mismatched dimensions {0} and {1}")]
    Dimension(usize, usize),
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("cannot curate {n} images from a pool of {pool} (need pool >= n >= 2)")]
    PoolTooSmall { pool: usize, n: usize },
    #[error("embedding images: {0}")]
    Embed(#[from] BackendError),
}

fn unit_rows(rows: &[EmbeddingVector]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let v = r.to_f64();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect()
}

fn sim(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

fn check_dims(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<(), ConsistencyError> {
    let d = a[0].dim();
    match a.iter().chain(b).find(|v| v.dim() != d) {
        Some(v) => Err(ConsistencyError::Dimension(d, v.dim())),
        None => Ok(()),
    }
}

/// Mean pairwise cosine similarity of one set over its unordered distinct pairs.
pub fn self_consistency(rows: &[EmbeddingVector]) -> Result<f64, ConsistencyError> {
    if rows.len() < 2 {
        return Err(if rows.is_empty() { ConsistencyError::EmptySet } else { ConsistencyError::Singleton(rows.len()) });
    }
    check_dims(rows, &[])?;
    let u = unit_rows(rows);
    let mut total = 0.0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            total += sim(&u[i], &u[j]);
        }
    }
    let pairs = u.len() * (u.len() - 1) / 2;
    Ok(total / pairs as f64)
}

/// Mean cosine similarity over all pairs drawn from two different sets.
pub fn cross_consistency(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<f64, ConsistencyError> {
    if a.is_empty() || b.is_empty() {
        return Err(ConsistencyError::EmptySet);
    }
    check_dims(a, b)?;
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let total: f64 = ua.iter().map(|x| ub.iter().map(|y| sim(x, y)).sum::<f64>()).sum();
    Ok(total / (ua.len() * ub.len()) as f64)
}

/// Index of the best report: highest objective, ties to the lowest seed.
pub fn best_index(candidates: &[(u64, ConsistencyReport)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (seed, report)) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bs, br) = &candidates[b];
                if report.objective > br.objective || (report.objective == br.objective && seed < bs) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn select_best_seed(candidates: &[CandidatePair]) -> Result<&CandidatePair, ConsistencyError> {
    let keys: Vec<_> = candidates.iter().map(|c| (c.seed, c.report)).collect();
    best_index(&keys).map(|i| &candidates[i]).ok_or(ConsistencyError::NoCandidates)
}

/// Pool indices of the `n` members whose `n - 1` nearest neighbours are
/// closest on average, ordered by descending mean cosine similarity to the
/// rest of the pool; ties go to the lower index.
///
/// Scoring each member against its nearest neighbours rather than the whole
/// pool means a lone outlier that points toward a cluster cannot outrank the
/// cluster's own members, while two equally tight groups rank alike whatever
/// their sizes.
pub fn curate_indices(pool: &[EmbeddingVector], n: usize) -> Result<Vec<usize>, ConsistencyError> {
    if n < 2 || pool.len() < n {
        return Err(ConsistencyError::PoolTooSmall { pool: pool.len(), n });
    }
    check_dims(pool, &[])?;
    let u = unit_rows(pool);
    let mut neighbour = Vec::with_capacity(u.len());
    let mut overall = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        let mut sims: Vec<f64> = (0..u.len()).filter(|&j| j != i).map(|j| sim(&u[i], &u[j])).collect();
        overall.push(sims.iter().sum::<f64>() / sims.len() as f64);
        sims.sort_by(|a, b| b.total_cmp(a));
        neighbour.push(sims[..n - 1].iter().sum::<f64>() / (n - 1) as f64);
    }
    let by = |key: &[f64], a: usize, b: usize| key[b].total_cmp(&key[a]).then(a.cmp(&b));
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| by(&neighbour, a, b));
    order.truncate(n);
    order.sort_by(|&a, &b| by(&overall, a, b));
    Ok(order)
}

/// Stopping rule: incoherence is checked before indistinctness.
pub fn evaluate_stop(report: &ConsistencyReport, config: &BuildConfig) -> StopDecision {
    if report.min_self() < config.self_coherency_threshold {
        StopDecision::LeafIncoherent
    } else if report.cross >= config.sibling_distinctness_threshold {
        StopDecision::LeafNotDistinct
    } else {
        StopDecision::SplitOk
    }
}

/// Symmetric matrix of pairwise set consistencies; the diagonal holds
/// self-consistencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub labels: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ConsistencyMatrix {
    /// Matrix over already embedded sets, labelled in input order.
    pub fn from_rows(labels: Vec<String>, rows: &[&[EmbeddingVector]]) -> Result<Self, ConsistencyError> {
        let n = rows.len();
        let mut scores = vec![vec![0.0; n]; n];
        for i in 0..n {
            scores[i][i] = self_consistency(rows[i])?;
            for j in i + 1..n {
                let c = cross_consistency(rows[i], rows[j])?;
                scores[i][j] = c;
                scores[j][i] = c;
            }
        }
        Ok(Self { labels, scores })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i][j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.labels.len();
        self.scores.len() == n
            && self.scores.iter().all(|r| r.len() == n)
            && (0..n).all(|i| (0..n).all(|j| (self.scores[i][j] - self.scores[j][i]).abs() <= tol))
    }
}

/// Scores image sets through a backend's image embedder, caching embeddings
/// on each set so that one set is embedded at most once.
pub struct Scorer<'a> {
    backend: &'a dyn Backend,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self { backend }
    }

    pub fn embeddings<'s>(&self, set: &'s ImageSet) -> Result<&'s [EmbeddingVector], ConsistencyError> {
        if set.is_empty() {
            return Err(ConsistencyError::EmptySet);
        }
        Ok(set.cache_embeddings(|images| self.backend.embed_images(images))?)
    }

    /// Self-consistency when both arguments list the same images in the same
    /// order, cross-consistency otherwise.
    pub fn consistency(&self, a: &ImageSet, b: &ImageSet) -> Result<f64, ConsistencyError> {
        if a.same_images(b) {
            if a.len() < 2 {
                return Err(if a.is_empty() { ConsistencyError::EmptySet } else { ConsistencyError::Singleton(a.len()) });
            }
            return self_consistency(self.embeddings(a)?);
        }
        cross_consistency(self.embeddings(a)?, self.embeddings(b)?)
    }

    pub fn score_candidate(&self, left: &ImageSet, right: &ImageSet) -> Result<ConsistencyReport, ConsistencyError> {
        for s in [left, right] {
            if s.len() < 2 {
                return Err(if s.is_empty() { ConsistencyError::EmptySet } else { ConsistencyError::Singleton(s.len()) });
            }
        }
        let l = self_consistency(self.embeddings(left)?)?;
        let r = self_consistency(self.embeddings(right)?)?;
        let cross = cross_consistency(self.embeddings(left)?, self.embeddings(right)?)?;
        Ok(ConsistencyReport::new(l, r, cross))
    }

    /// Cross-consistency between a parent's samples and samples of the joint
    /// sibling prompt.
    pub fn measure_reconstruction(&self, parent: &ImageSet, joint: &ImageSet) -> Result<f64, ConsistencyError> {
        self.consistency(parent, joint)
    }

    pub fn curate_training_set(&self, pool: &ImageSet, n: usize) -> Result<ImageSet, ConsistencyError> {
        if n < 2 || pool.len() < n {
            return Err(ConsistencyError::PoolTooSmall { pool: pool.len(), n });
        }
        let idx = curate_indices(self.embeddings(pool)?, n)?;
        Ok(pool.select(&idx))
    }

    pub fn consistency_matrix(&self, sets: &[(String, &ImageSet)]) -> Result<ConsistencyMatrix, ConsistencyError> {
        let rows: Vec<&[EmbeddingVector]> = sets.iter().map(|(_, s)| self.embeddings(s)).collect::<Result<_, _>>()?;
        ConsistencyMatrix::from_rows(sets.iter().map(|(l, _)| l.clone()).collect(), &rows)
    }
}
