//! Contract with the text-to-image system.
//!
//! A backend encodes images to latents, evaluates the noise-prediction loss
//! and its gradient with respect to injected token embeddings, generates
//! images from prompts, and embeds images for consistency scoring. Backend
//! weights and the base vocabulary are frozen: nothing here mutates them.

pub mod instrumented;
pub mod mock;
pub mod remote;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::dictionary::{BaseVocabulary, DictionaryError, TokenDictionary};
use crate::embedding::EmbeddingVector;
use crate::image::{ImageRef, ImageSet};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot decode image {id}: {reason}")]
    Decode { id: String, reason: String },
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: u32, steps: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {0:?} is not a trainable injected token")]
    NotTrainable(String),
    #[error("prompt {0:?} has no resolvable tokens")]
    UnresolvablePrompt(String),
    #[error("generation failed (retryable): {0}")]
    Generation(String),
    #[error("remote backend: {0}")]
    Remote(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Generation(_) | BackendError::Remote(_))
    }
}

/// Signal and noise coefficients per timestep (`z_t = alpha_t z + sigma_t eps`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    signal: Vec<f64>,
    noise: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the schedule from cumulative products of `1 - beta`.
    pub fn from_alphas_cumprod(alphas_cumprod: &[f64]) -> Result<Self, BackendError> {
        if alphas_cumprod.is_empty() {
            return Err(BackendError::Shape("empty noise schedule".into()));
        }
        let mut signal = Vec::with_capacity(alphas_cumprod.len());
        let mut noise = Vec::with_capacity(alphas_cumprod.len());
        for &a in alphas_cumprod {
            if !(a > 0.0 && a < 1.0) {
                return Err(BackendError::Shape(format!("cumulative alpha {a} outside (0, 1)")));
            }
            signal.push(a.sqrt());
            noise.push((1.0 - a).sqrt());
        }
        Ok(Self { signal, noise })
    }

    /// Scaled-linear beta schedule (betas linear in sqrt space), the common
    /// latent-diffusion default.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut cumprod = 1.0;
        let alphas_cumprod: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                let beta = (s + (e - s) * frac).powi(2);
                cumprod *= 1.0 - beta;
                cumprod
            })
            .collect();
        Self::from_alphas_cumprod(&alphas_cumprod).expect("betas in (0, 1)")
    }

    pub fn steps(&self) -> u32 {
        self.signal.len() as u32
    }

    fn index(&self, t: u32) -> Result<usize, BackendError> {
        if t == 0 || t > self.steps() {
            Err(BackendError::TimestepOutOfRange { t, steps: self.steps() })
        } else {
            Ok((t - 1) as usize)
        }
    }

    pub fn signal(&self, t: u32) -> Result<f64, BackendError> {
        Ok(self.signal[self.index(t)?])
    }

    pub fn noise(&self, t: u32) -> Result<f64, BackendError> {
        Ok(self.noise[self.index(t)?])
    }
}

/// Forward-noises a latent: `alpha_t * z + sigma_t * eps`.
pub fn noise_latent(z: &[f64], t: u32, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, BackendError> {
    if z.len() != eps.len() {
        return Err(BackendError::Shape(format!("latent {} vs noise {}", z.len(), eps.len())));
    }
    let a = schedule.signal(t)?;
    let s = schedule.noise(t)?;
    Ok(z.iter().zip(eps).map(|(zi, ei)| a * zi + s * ei).collect())
}

/// Inputs of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendBatch {
    pub latents: Vec<Vec<f64>>,
    pub timesteps: Vec<u32>,
    pub noises: Vec<Vec<f64>>,
    pub prompt: String,
}

impl BackendBatch {
    pub fn check(&self) -> Result<(), BackendError> {
        let n = self.latents.len();
        if n == 0 || self.timesteps.len() != n || self.noises.len() != n {
            return Err(BackendError::Shape(format!(
                "batch sizes differ: {} latents, {} timesteps, {} noises",
                n,
                self.timesteps.len(),
                self.noises.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStepResult {
    pub loss: f64,
    pub gradients: BTreeMap<String, Vec<f64>>,
}

pub trait Backend: Send + Sync {
    /// Short identifier recorded in archives.
    fn name(&self) -> String;

    fn base_vocabulary(&self) -> Arc<BaseVocabulary>;

    fn schedule(&self) -> &NoiseSchedule;

    fn latent_dim(&self) -> usize;

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError>;

    /// Mean noise-prediction loss of the batch and its exact gradient with
    /// respect to each trainable token. Only those tokens receive gradients.
    fn loss_and_gradient(
        &self,
        batch: &BackendBatch,
        dict: &TokenDictionary,
        trainable: &[String],
    ) -> Result<TrainStepResult, BackendError>;

    /// `n` images for `prompt`; deterministic for a fixed dictionary and seed.
    fn generate(&self, prompt: &str, dict: &TokenDictionary, seed: u64, n: usize) -> Result<ImageSet, BackendError>;

    /// Semantic image embedding used by consistency scoring.
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, BackendError>;

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<EmbeddingVector>, BackendError> {
        images.iter().map(|i| self.embed_image(i)).collect()
    }

    /// Hash over frozen weights and base vocabulary.
    fn weights_checksum(&self) -> String;
}

/// Checks the common preconditions of `loss_and_gradient`.
pub(crate) fn check_trainable(dict: &TokenDictionary, trainable: &[String]) -> Result<(), BackendError> {
    for t in trainable {
        if !dict.is_injected(t) {
            return Err(BackendError::NotTrainable(t.clone()));
        }
    }
    Ok(())
}

/// Which backend to open, usually read from the environment
/// (`BACKEND=mock|real`, `MODEL_ID`, `DEVICE`, `BACKEND_URL`, `MOCK_CONCEPT_SPACE`).
#[derive(Clone, Debug, PartialEq)]
pub enum BackendSpec {
    Mock { concept_space: Option<PathBuf> },
    Real(remote::RemoteConfig),
}

impl BackendSpec {
    pub fn from_env() -> Result<Self, BackendError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, BackendError> {
        match get("BACKEND").as_deref().unwrap_or("mock") {
            "mock" => Ok(BackendSpec::Mock { concept_space: get("MOCK_CONCEPT_SPACE").map(PathBuf::from) }),
            "real" => {
                let endpoint = get("BACKEND_URL")
                    .ok_or_else(|| BackendError::Config("BACKEND=real requires BACKEND_URL".into()))?;
                Ok(BackendSpec::Real(remote::RemoteConfig {
                    endpoint,
                    model_id: get("MODEL_ID"),
                    device: get("DEVICE"),
                    precision: get("PRECISION"),
                }))
            }
            other => Err(BackendError::Config(format!("unknown BACKEND {other:?}, expected mock or real"))),
        }
    }

    pub fn open(&self) -> Result<Arc<dyn Backend>, BackendError> {
        match self {
            BackendSpec::Mock { concept_space } => {
                let space = match concept_space {
                    Some(path) => mock::ConceptSpace::from_file(path)?,
                    None => mock::ConceptSpace::default(),
                };
                Ok(Arc::new(mock::MockBackend::new(space)?))
            }
            BackendSpec::Real(config) => Ok(Arc::new(remote::RemoteBackend::connect(config.clone())?)),
        }
    }
}
