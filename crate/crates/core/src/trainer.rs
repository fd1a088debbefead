//! Paired sibling-embedding optimization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::backend::{Backend, BackendBatch, BackendError};
use crate::config::BuildConfig;
use crate::dictionary::{compose_prompt, DictionaryError, TokenDictionary};
use crate::embedding::EmbeddingVector;
use crate::image::ImageSet;
use crate::timestep::{SamplerError, TimestepDistribution};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("training set is empty")]
    NoImages,
    #[error("left and right token are both {0:?}")]
    SameToken(String),
    #[error("token {0:?} is not an injected token")]
    NotInjected(String),
    #[error("step budget exceeded: {requested} more steps after {done} of {budget}")]
    BudgetExceeded { done: usize, requested: usize, budget: usize },
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Optimization state of one sibling pair under one seed.
///
/// Each step draws `batch_size` training images (epoch-shuffled), one
/// timestep per image from the skewed distribution and fresh Gaussian noise,
/// then applies one SGD update to the two sibling embeddings. The job owns its
/// dictionary clone and random state, so separate jobs never interact.
#[derive(Clone, Debug)]
pub struct TrainJob {
    parent_images: ImageSet,
    latents: Vec<Vec<f64>>,
    left: String,
    right: String,
    trainable: [String; 2],
    prompt: String,
    dict: TokenDictionary,
    config: BuildConfig,
    seed: u64,
    budget: usize,
    step: usize,
    loss_history: Vec<f64>,
    timestep_history: Vec<u32>,
    sampler: TimestepDistribution,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    params: [Vec<f64>; 2],
}

impl TrainJob {
    /// Prepares a job. Both tokens must already be injected into `dict`.
    pub fn new(
        backend: &dyn Backend,
        parent_images: ImageSet,
        left: &str,
        right: &str,
        dict: TokenDictionary,
        config: BuildConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if parent_images.is_empty() {
            return Err(TrainError::NoImages);
        }
        if left == right {
            return Err(TrainError::SameToken(left.to_owned()));
        }
        for t in [left, right] {
            if !dict.is_injected(t) {
                return Err(TrainError::NotInjected(t.to_owned()));
            }
        }
        let latents =
            parent_images.images().iter().map(|im| backend.encode_image(im)).collect::<Result<Vec<_>, _>>()?;
        let prompt = compose_prompt(&dict, &config.train_template, &[left, right])?;
        let sampler = TimestepDistribution::new(backend.schedule().steps(), config.alpha)?;
        let params = [dict.injected()[left].to_f64(), dict.injected()[right].to_f64()];
        Ok(Self {
            latents,
            parent_images,
            left: left.to_owned(),
            right: right.to_owned(),
            trainable: [left.to_owned(), right.to_owned()],
            prompt,
            budget: config.step_budget(),
            dict,
            config,
            seed,
            step: 0,
            loss_history: Vec::new(),
            timestep_history: Vec::new(),
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            params,
        })
    }

    /// Overrides the step budget (defaults to candidate plus final steps).
    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    /// Same job under another seed. Only meaningful before the first step.
    pub fn with_seed(mut self, seed: u64) -> Self {
        debug_assert_eq!(self.step, 0);
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.order.clear();
        self.cursor = 0;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn tokens(&self) -> (&str, &str) {
        (&self.left, &self.right)
    }

    pub fn parent_images(&self) -> &ImageSet {
        &self.parent_images
    }

    pub fn dictionary(&self) -> &TokenDictionary {
        &self.dict
    }

    pub fn into_dictionary(self) -> TokenDictionary {
        self.dict
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn timestep_history(&self) -> &[u32] {
        &self.timestep_history
    }

    pub fn snapshot_embeddings(&self) -> (EmbeddingVector, EmbeddingVector) {
        (self.dict.injected()[&self.left].clone(), self.dict.injected()[&self.right].clone())
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.latents.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn next_batch(&mut self) -> BackendBatch {
        let dim = self.latents[0].len();
        let mut batch = BackendBatch {
            latents: Vec::with_capacity(self.config.batch_size),
            timesteps: Vec::with_capacity(self.config.batch_size),
            noises: Vec::with_capacity(self.config.batch_size),
            prompt: self.prompt.clone(),
        };
        for _ in 0..self.config.batch_size {
            let i = self.next_index();
            batch.latents.push(self.latents[i].clone());
            batch.timesteps.push(self.sampler.sample(&mut self.rng));
            batch.noises.push((0..dim).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect());
        }
        batch
    }

    /// Runs `steps` optimization steps and returns the losses they produced.
    pub fn train_pair(&mut self, backend: &dyn Backend, steps: usize) -> Result<&[f64], TrainError> {
        self.train_pair_with(backend, steps, &mut |_, _| {})
    }

    /// Like [`TrainJob::train_pair`], reporting `(step, loss)` after every step.
    ///
    /// On error the job keeps the state of the last completed step.
    pub fn train_pair_with(
        &mut self,
        backend: &dyn Backend,
        steps: usize,
        progress: &mut dyn FnMut(usize, f64),
    ) -> Result<&[f64], TrainError> {
        if steps == 0 {
            return Err(TrainError::ZeroSteps);
        }
        if self.step + steps > self.budget {
            return Err(TrainError::BudgetExceeded { done: self.step, requested: steps, budget: self.budget });
        }
        let start = self.loss_history.len();
        let lr = self.config.learning_rate;
        for _ in 0..steps {
            let batch = self.next_batch();
            let result = backend.loss_and_gradient(&batch, &self.dict, &self.trainable)?;
            let grads = [&result.gradients[&self.left], &result.gradients[&self.right]];
            let finite = result.loss.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(TrainError::NonFinite { step: self.step + 1 });
            }
            let mut updated = self.params.clone();
            for (p, g) in updated.iter_mut().zip(grads) {
                if p.len() != g.len() {
                    return Err(BackendError::Shape(format!("gradient length {} for {} parameters", g.len(), p.len())).into());
                }
                p.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
            }
            let mut vectors = Vec::with_capacity(2);
            for p in &updated {
                vectors.push(EmbeddingVector::from_f64(p).map_err(|_| TrainError::NonFinite { step: self.step + 1 })?);
            }
            let mut dict = self.dict.clone();
            for (token, v) in self.trainable.iter().zip(vectors) {
                dict.set_embedding(token, v)?;
            }
            self.dict = dict;
            self.params = updated;
            self.timestep_history.extend_from_slice(&batch.timesteps);
            self.step += 1;
            self.loss_history.push(result.loss);
            progress(self.step, result.loss);
        }
        Ok(&self.loss_history[start..])
    }
}
