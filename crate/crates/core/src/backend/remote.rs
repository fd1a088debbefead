//! Adapter for a pretrained latent-diffusion model served by an external
//! inference worker over HTTP/JSON.
//!
//! The worker owns the model weights and is stateless with respect to
//! placeholder tokens: every request carries the injected embeddings it needs.
//!
//! | method | path                 | request                                                        | response                      |
//! |--------|----------------------|----------------------------------------------------------------|-------------------------------|
//! | GET    | `/info`              |                                                                | [`WorkerInfo`]                |
//! | POST   | `/encode`            | `{image}`                                                      | `{latent}`                    |
//! | POST   | `/loss_and_gradient` | `{latents, timesteps, noises, prompt, embeddings, trainable}`  | `{loss, gradients}`           |
//! | POST   | `/generate`          | `{prompt, embeddings, seed, n}`                                | `{images}`                    |
//! | POST   | `/embed_images`      | `{images}`                                                     | `{embeddings}`                |
//!
//! Images travel as base64-encoded PNG. `model_id`, `device` and `precision`
//! from [`RemoteConfig`] are forwarded on every request.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_trainable, Backend, BackendBatch, BackendError, NoiseSchedule, TrainStepResult};
use crate::dictionary::{prompt_placeholders, BaseVocabulary, TokenDictionary};
use crate::embedding::EmbeddingVector;
use crate::image::{ImagePayload, ImageRef, ImageSet};

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model_id: Option<String>,
    pub device: Option<String>,
    pub precision: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub model: String,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub alphas_cumprod: Vec<f64>,
    /// Base words the worker exposes (at least the init word).
    pub vocabulary: BTreeMap<String, Vec<f32>>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    model_id: Option<&'a str>,
    device: Option<&'a str>,
    precision: Option<&'a str>,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct ImageBody {
    image: String,
}

#[derive(Deserialize)]
struct LatentReply {
    latent: Vec<f64>,
}

#[derive(Serialize)]
struct LossBody<'a> {
    latents: &'a [Vec<f64>],
    timesteps: &'a [u32],
    noises: &'a [Vec<f64>],
    prompt: &'a str,
    embeddings: BTreeMap<&'a str, &'a [f32]>,
    trainable: &'a [String],
}

#[derive(Deserialize)]
struct LossReply {
    loss: f64,
    gradients: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    embeddings: BTreeMap<&'a str, &'a [f32]>,
    seed: u64,
    n: usize,
}

#[derive(Deserialize)]
struct GenerateReply {
    images: Vec<String>,
}

#[derive(Serialize)]
struct EmbedBody {
    images: Vec<String>,
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f32>>,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    info: WorkerInfo,
    vocabulary: Arc<BaseVocabulary>,
    schedule: NoiseSchedule,
    train_lock: Mutex<()>,
}

impl RemoteBackend {
    pub fn connect(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BackendError::Remote(e.to_string()))?;
        let url = format!("{}/info", config.endpoint.trim_end_matches('/'));
        let info: WorkerInfo = client
            .get(url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| BackendError::Remote(e.to_string()))?;
        let words = info
            .vocabulary
            .iter()
            .map(|(w, v)| EmbeddingVector::new(v.clone()).map(|e| (w.clone(), e)))
            .collect::<Result<BTreeMap<_, _>, _>>()
            .map_err(|e| BackendError::Remote(format!("bad vocabulary vector: {e}")))?;
        let vocabulary = Arc::new(BaseVocabulary::new(info.embed_dim, words)?);
        let schedule = NoiseSchedule::from_alphas_cumprod(&info.alphas_cumprod)?;
        Ok(Self { config, client, info, vocabulary, schedule, train_lock: Mutex::new(()) })
    }

    pub fn info(&self) -> &WorkerInfo {
        &self.info
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: B) -> Result<R, BackendError> {
        let envelope = Envelope {
            model_id: self.config.model_id.as_deref(),
            device: self.config.device.as_deref(),
            precision: self.config.precision.as_deref(),
            body,
        };
        let url = format!("{}{}", self.config.endpoint.trim_end_matches('/'), path);
        self.client
            .post(url)
            .json(&envelope)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| BackendError::Remote(format!("{path}: {e}")))
    }

    fn png_base64(image: &ImageRef) -> Result<String, BackendError> {
        match &image.payload {
            ImagePayload::Png(bytes) => Ok(STANDARD.encode(bytes)),
            ImagePayload::Vector(_) => Err(BackendError::Decode {
                id: image.id.clone(),
                reason: "remote backend needs PNG payloads".into(),
            }),
        }
    }

    fn prompt_embeddings<'a>(
        prompt: &str,
        dict: &'a TokenDictionary,
    ) -> Result<BTreeMap<&'a str, &'a [f32]>, BackendError> {
        prompt_placeholders(prompt)
            .iter()
            .map(|p| {
                dict.injected()
                    .get_key_value(p.as_str())
                    .map(|(k, v)| (k.as_str(), v.as_slice()))
                    .ok_or_else(|| BackendError::UnresolvablePrompt(format!("{prompt} (unknown <{p}>)")))
            })
            .collect()
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.config.model_id.as_deref().unwrap_or(&self.info.model))
    }

    fn base_vocabulary(&self) -> Arc<BaseVocabulary> {
        Arc::clone(&self.vocabulary)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_dim(&self) -> usize {
        self.info.latent_dim
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let reply: LatentReply = self.post("/encode", ImageBody { image: Self::png_base64(image)? })?;
        if reply.latent.len() != self.info.latent_dim {
            return Err(BackendError::Shape(format!("worker returned latent of length {}", reply.latent.len())));
        }
        Ok(reply.latent)
    }

    fn loss_and_gradient(
        &self,
        batch: &BackendBatch,
        dict: &TokenDictionary,
        trainable: &[String],
    ) -> Result<TrainStepResult, BackendError> {
        check_trainable(dict, trainable)?;
        batch.check()?;
        let _guard = self.train_lock.lock().unwrap_or_else(|p| p.into_inner());
        let reply: LossReply = self.post(
            "/loss_and_gradient",
            LossBody {
                latents: &batch.latents,
                timesteps: &batch.timesteps,
                noises: &batch.noises,
                prompt: &batch.prompt,
                embeddings: Self::prompt_embeddings(&batch.prompt, dict)?,
                trainable,
            },
        )?;
        let mut gradients = BTreeMap::new();
        for t in trainable {
            let g = reply
                .gradients
                .get(t)
                .cloned()
                .ok_or_else(|| BackendError::Remote(format!("worker omitted gradient for {t}")))?;
            if g.len() != dict.embed_dim() {
                return Err(BackendError::Shape(format!("gradient for {t} has length {}", g.len())));
            }
            gradients.insert(t.clone(), g);
        }
        Ok(TrainStepResult { loss: reply.loss, gradients })
    }

    fn generate(&self, prompt: &str, dict: &TokenDictionary, seed: u64, n: usize) -> Result<ImageSet, BackendError> {
        if n == 0 {
            return Err(BackendError::Generation("n must be at least 1".into()));
        }
        let reply: GenerateReply = self
            .post("/generate", GenerateBody { prompt, embeddings: Self::prompt_embeddings(prompt, dict)?, seed, n })
            .map_err(|e| BackendError::Generation(e.to_string()))?;
        if reply.images.len() != n {
            return Err(BackendError::Generation(format!("asked for {n} images, got {}", reply.images.len())));
        }
        reply
            .images
            .iter()
            .map(|b64| {
                let bytes = STANDARD.decode(b64).map_err(|e| BackendError::Generation(e.to_string()))?;
                Ok(ImageRef::generated(ImagePayload::Png(bytes.into()), seed, prompt))
            })
            .collect()
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, BackendError> {
        let mut rows = self.embed_images(std::slice::from_ref(image))?;
        Ok(rows.remove(0))
    }

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let encoded = images.iter().map(Self::png_base64).collect::<Result<Vec<_>, _>>()?;
        let reply: EmbedReply = self.post("/embed_images", EmbedBody { images: encoded })?;
        if reply.embeddings.len() != images.len() {
            return Err(BackendError::Shape(format!(
                "asked for {} embeddings, got {}",
                images.len(),
                reply.embeddings.len()
            )));
        }
        reply
            .embeddings
            .into_iter()
            .zip(images)
            .map(|(v, img)| {
                EmbeddingVector::new(v).map_err(|e| BackendError::Decode { id: img.id.clone(), reason: e.to_string() })
            })
            .collect()
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.info.model.as_bytes());
        h.update(self.vocabulary.fingerprint().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
