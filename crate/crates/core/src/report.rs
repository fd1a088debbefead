use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::image::ImageSet;

/// Self-consistency of both siblings, their cross-consistency, and the
/// seed-selection objective derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub self_left: f64,
    pub self_right: f64,
    pub cross: f64,
    pub objective: f64,
}

impl ConsistencyReport {
    pub fn new(self_left: f64, self_right: f64, cross: f64) -> Self {
        Self { self_left, self_right, cross, objective: objective(self_left, self_right, cross) }
    }

    pub fn min_self(&self) -> f64 {
        self.self_left.min(self.self_right)
    }

    /// Objective recomputed from the three stored scores.
    pub fn recomputed_objective(&self) -> f64 {
        objective(self.self_left, self.self_right, self.cross)
    }

    pub fn is_well_formed(&self) -> bool {
        let in_range = |v: f64| (-1.0..=1.0).contains(&v);
        in_range(self.self_left)
            && in_range(self.self_right)
            && in_range(self.cross)
            && self.objective.to_bits() == self.recomputed_objective().to_bits()
    }
}

/// Both self-consistencies plus the gap between the weaker sibling and the
/// cross score: high when each node is coherent and the two are distinct.
pub fn objective(self_left: f64, self_right: f64, cross: f64) -> f64 {
    self_left + self_right + (self_left.min(self_right) - cross)
}

/// One seed's sibling pair together with its sample sets and report.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair {
    pub seed: u64,
    pub left_embedding: EmbeddingVector,
    pub right_embedding: EmbeddingVector,
    pub left_samples: ImageSet,
    pub right_samples: ImageSet,
    pub report: ConsistencyReport,
}

/// Outcome of the stopping rule for one scored split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopDecision {
    SplitOk,
    LeafIncoherent,
    LeafNotDistinct,
}
