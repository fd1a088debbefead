use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("{name} must lie in [-1, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("need score_set_size >= train_set_size >= 2, got {score} and {train}")]
    SetSizes { score: usize, train: usize },
    #[error("k_seeds must not be empty")]
    NoSeeds,
    #[error("duplicate seed {0}")]
    DuplicateSeed(u64),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("template {template:?} must have exactly {expected} slot(s)")]
    Template { template: String, expected: usize },
}

/// Parameters of a tree build. Defaults reproduce the reference setup:
/// four seeds, 200 candidate steps, 1500 finalization steps, batch size 2 at
/// learning rate 0.004, and the skewed timestep sampler at alpha 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub alpha: f64,
    pub k_seeds: Vec<u64>,
    pub candidate_steps: usize,
    pub final_steps: usize,
    pub score_set_size: usize,
    pub train_set_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_depth: u32,
    pub self_coherency_threshold: f64,
    pub sibling_distinctness_threshold: f64,
    pub init_word: String,
    pub train_template: String,
    /// Single-slot template used to sample images of one node.
    pub node_template: String,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k_seeds: vec![0, 1000, 1234, 111],
            candidate_steps: 200,
            final_steps: 1500,
            score_set_size: 40,
            train_set_size: 10,
            batch_size: 2,
            learning_rate: 0.004,
            max_depth: 2,
            self_coherency_threshold: 0.70,
            sibling_distinctness_threshold: 0.70,
            init_word: "object".to_owned(),
            train_template: "A photograph of {left} {right}".to_owned(),
            node_template: "A photograph of {a}".to_owned(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        for (name, value) in [
            ("self_coherency_threshold", self.self_coherency_threshold),
            ("sibling_distinctness_threshold", self.sibling_distinctness_threshold),
        ] {
            if !(-1.0..=1.0).contains(&value) {
                return Err(ConfigError::Threshold { name, value });
            }
        }
        if !(self.score_set_size >= self.train_set_size && self.train_set_size >= 2) {
            return Err(ConfigError::SetSizes { score: self.score_set_size, train: self.train_set_size });
        }
        if self.k_seeds.is_empty() {
            return Err(ConfigError::NoSeeds);
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.k_seeds {
            if !seen.insert(s) {
                return Err(ConfigError::DuplicateSeed(s));
            }
        }
        for (name, value) in [
            ("candidate_steps", self.candidate_steps),
            ("final_steps", self.final_steps),
            ("batch_size", self.batch_size),
        ] {
            if value == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::LearningRate(self.learning_rate));
        }
        for (template, expected) in [(&self.train_template, 2), (&self.node_template, 1)] {
            if crate::dictionary::template_slots(template) != expected {
                return Err(ConfigError::Template { template: template.clone(), expected });
            }
        }
        Ok(())
    }

    /// Total optimization budget of one sibling pair.
    pub fn step_budget(&self) -> usize {
        self.candidate_steps + self.final_steps
    }
}
