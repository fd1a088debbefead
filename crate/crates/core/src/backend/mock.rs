//! Deterministic synthetic backend over a small concept space.
//!
//! Images are vectors in a `d`-dimensional space. Encoding and image
//! embedding are the identity. A prompt's condition is the mean of its
//! placeholder vectors (or of its known base words when it has none).
//!
//! Generation decodes the condition `c` into a mixture over the named
//! concepts of the space: the weights `w` are the projection of `c` onto the
//! simplex spanned by the concepts, a fraction `w_i` of the images (systematic
//! sampling) starts from concept `i`, and the projection residual plus
//! Gaussian noise of scale `sigma_gen` is added. The expected image is
//! therefore `c`; with no named concepts every image is `c` plus noise.
//!
//! The training loss per sample (image latent `z`, placeholder vectors `u_j`
//! in prompt order, `c = mean_j u_j`) is
//!
//! ```text
//! gain * ( |c - z|^2 + aspect_weight * A )
//! A = -tau * log( sum_j pi_j(zh) * exp(-|u_j - zh|^2 / tau) )
//! ```
//!
//! where `zh = z + routing_noise * (z_t - alpha_t z)` is a noisy view of the
//! latent and `pi_j(zh) = softmax_j(<p_j, zh> / tau)` is a fixed positional
//! affinity of prompt slot `j`. The first term is the reconstruction
//! surrogate with a closed-form optimum (`c` at the latent mean). The second
//! is a soft assignment of each latent to one slot; it is non-negative and
//! pulls sibling tokens toward distinct modes of the training set. The slot
//! affinities break the symmetry between two tokens initialized to the same
//! vector.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_trainable, noise_latent, Backend, BackendBatch, BackendError, NoiseSchedule, TrainStepResult};
use crate::dictionary::{prompt_placeholders, tokenize, BaseVocabulary, PromptToken, TokenDictionary};
use crate::embedding::{dot, EmbeddingVector};
use crate::image::{ImagePayload, ImageRef, ImageSet};

/// Words present in every mock vocabulary unless overridden.
pub const DEFAULT_WORDS: &[&str] = &[
    "a", "an", "and", "by", "chair", "cat", "drawing", "dress", "in", "made", "object", "of", "on", "painting",
    "photo", "photograph", "sculpture", "shape", "style", "the", "with",
];

/// Contents of a concept-space spec file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSpace {
    pub dimension: usize,
    pub seed: u64,
    pub sigma_gen: f64,
    /// Named concept vectors that generation decodes conditions into.
    pub concepts: BTreeMap<String, Vec<f32>>,
    /// Base-vocabulary vectors overriding or extending the generated words.
    pub vocabulary: BTreeMap<String, Vec<f32>>,
    pub timesteps: usize,
    pub loss_gain: f64,
    pub aspect_weight: f64,
    pub aspect_temperature: f64,
    pub slot_affinity: f64,
    pub routing_noise: f64,
}

impl Default for ConceptSpace {
    fn default() -> Self {
        Self {
            dimension: 16,
            seed: 0,
            sigma_gen: 0.05,
            concepts: BTreeMap::new(),
            vocabulary: BTreeMap::new(),
            timesteps: 1000,
            loss_gain: 10.0,
            aspect_weight: 1.0,
            aspect_temperature: 0.1,
            slot_affinity: 0.5,
            routing_noise: 0.05,
        }
    }
}

impl ConceptSpace {
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("parsing {}: {e}", path.display())))
    }

    /// Pure reconstruction surrogate: no aspect term, unit gain.
    pub fn quadratic(mut self) -> Self {
        self.aspect_weight = 0.0;
        self.loss_gain = 1.0;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Config(m));
        if self.dimension == 0 {
            return bad("dimension must be positive".into());
        }
        for (name, v) in self.concepts.iter().chain(&self.vocabulary) {
            if v.len() != self.dimension {
                return bad(format!("vector {name:?} has length {}, expected {}", v.len(), self.dimension));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("vector {name:?} has non-finite entries"));
            }
        }
        for (name, value) in [
            ("sigma_gen", self.sigma_gen),
            ("loss_gain", self.loss_gain),
            ("aspect_weight", self.aspect_weight),
            ("slot_affinity", self.slot_affinity),
            ("routing_noise", self.routing_noise),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.aspect_temperature.is_finite() && self.aspect_temperature > 0.0) {
            return bad("aspect_temperature must be positive".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive".into());
        }
        Ok(())
    }
}

pub struct MockBackend {
    space: ConceptSpace,
    atoms: Vec<Vec<f64>>,
    vocabulary: Arc<BaseVocabulary>,
    schedule: NoiseSchedule,
    checksum: String,
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest[..32].try_into().expect("32-byte digest"))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

impl MockBackend {
    pub fn new(space: ConceptSpace) -> Result<Self, BackendError> {
        space.validate()?;
        let dim = space.dimension;
        let mut words = BTreeMap::new();
        for w in DEFAULT_WORDS {
            let mut rng = seeded_rng(&[b"word", &space.seed.to_le_bytes(), w.as_bytes()]);
            let v = gaussian_vector(&mut rng, dim, 1.0 / (dim as f64).sqrt());
            words.insert((*w).to_owned(), EmbeddingVector::from_f64(&v).expect("finite"));
        }
        for (w, v) in &space.vocabulary {
            words.insert(w.clone(), EmbeddingVector::new(v.clone()).expect("validated"));
        }
        let vocabulary = Arc::new(BaseVocabulary::new(dim, words)?);
        let atoms = space.concepts.values().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let schedule = NoiseSchedule::scaled_linear(space.timesteps, 0.00085, 0.012);
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&space).expect("serializable"));
        h.update(vocabulary.fingerprint().as_bytes());
        let checksum = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { space, atoms, vocabulary, schedule, checksum })
    }

    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    pub fn dimension(&self) -> usize {
        self.space.dimension
    }

    /// Fixed positional affinity vectors for a prompt with `slots` placeholders.
    pub fn slot_affinities(&self, slots: usize) -> Vec<Vec<f64>> {
        let dim = self.space.dimension;
        if slots < 2 {
            return vec![vec![0.0; dim]; slots];
        }
        let raw: Vec<Vec<f64>> = (0..slots)
            .map(|j| {
                let mut rng = seeded_rng(&[b"slot", &self.space.seed.to_le_bytes(), &(j as u64).to_le_bytes()]);
                gaussian_vector(&mut rng, dim, 1.0)
            })
            .collect();
        let mean: Vec<f64> = (0..dim).map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / slots as f64).collect();
        raw.into_iter()
            .map(|r| {
                let centered: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
                let norm = dot(&centered, &centered).sqrt();
                centered.iter().map(|x| x * self.space.slot_affinity / norm).collect()
            })
            .collect()
    }

    /// Mean loss of a batch for explicit slot vectors (prompt order). This is
    /// the scalar that `loss_and_gradient` differentiates.
    pub fn batch_loss(&self, batch: &BackendBatch, slots: &[Vec<f64>]) -> Result<f64, BackendError> {
        Ok(self.batch_loss_and_slot_gradients(batch, slots)?.0)
    }

    fn batch_loss_and_slot_gradients(
        &self,
        batch: &BackendBatch,
        slots: &[Vec<f64>],
    ) -> Result<(f64, Vec<Vec<f64>>), BackendError> {
        batch.check()?;
        let dim = self.space.dimension;
        let m = slots.len();
        if m == 0 {
            return Err(BackendError::UnresolvablePrompt(batch.prompt.clone()));
        }
        let affinities = self.slot_affinities(m);
        let tau = self.space.aspect_temperature;
        let gain = self.space.loss_gain;
        let lambda = self.space.aspect_weight;
        let c: Vec<f64> = (0..dim).map(|k| slots.iter().map(|u| u[k]).sum::<f64>() / m as f64).collect();

        let mut total = 0.0;
        let mut grads = vec![vec![0.0; dim]; m];
        let scale = 1.0 / batch.len() as f64;
        for ((z, &t), eps) in batch.latents.iter().zip(&batch.timesteps).zip(&batch.noises) {
            if z.len() != dim || eps.len() != dim {
                return Err(BackendError::Shape(format!("latent/noise length must be {dim}")));
            }
            let zt = noise_latent(z, t, eps, &self.schedule)?;
            let a_t = self.schedule.signal(t)?;
            let residual: Vec<f64> = c.iter().zip(z).map(|(ci, zi)| ci - zi).collect();
            let recon = dot(&residual, &residual);
            let mut sample_loss = recon;
            for g in grads.iter_mut() {
                for k in 0..dim {
                    g[k] += gain * scale * 2.0 * residual[k] / m as f64;
                }
            }
            if lambda > 0.0 {
                let zh: Vec<f64> =
                    z.iter().zip(&zt).map(|(zi, zti)| zi + self.space.routing_noise * (zti - a_t * zi)).collect();
                let prior: Vec<f64> = affinities.iter().map(|p| dot(p, &zh) / tau).collect();
                let dists: Vec<f64> = slots
                    .iter()
                    .map(|u| u.iter().zip(&zh).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let logits: Vec<f64> = prior.iter().zip(&dists).map(|(p, d)| p - d / tau).collect();
                let lse_joint = log_sum_exp(&logits);
                let aspect = -tau * (lse_joint - log_sum_exp(&prior));
                sample_loss += lambda * aspect.max(0.0);
                for (j, g) in grads.iter_mut().enumerate() {
                    let resp = (logits[j] - lse_joint).exp();
                    for k in 0..dim {
                        g[k] += gain * scale * lambda * resp * 2.0 * (slots[j][k] - zh[k]);
                    }
                }
            }
            total += gain * scale * sample_loss;
        }
        Ok((total, grads))
    }

    /// Condition vector of a prompt.
    pub fn condition(&self, prompt: &str, dict: &TokenDictionary) -> Result<Vec<f64>, BackendError> {
        let placeholders = prompt_placeholders(prompt);
        let vectors: Vec<Vec<f64>> = if placeholders.is_empty() {
            tokenize(prompt)
                .into_iter()
                .filter_map(|t| match t {
                    PromptToken::Word(w) => self.vocabulary.get(&w).map(EmbeddingVector::to_f64),
                    PromptToken::Placeholder(_) => None,
                })
                .collect()
        } else {
            placeholders
                .iter()
                .map(|p| {
                    dict.injected()
                        .get(p)
                        .map(EmbeddingVector::to_f64)
                        .ok_or_else(|| BackendError::UnresolvablePrompt(format!("{prompt} (unknown <{p}>)")))
                })
                .collect::<Result<_, _>>()?
        };
        if vectors.is_empty() {
            return Err(BackendError::UnresolvablePrompt(prompt.to_owned()));
        }
        let dim = self.space.dimension;
        Ok((0..dim).map(|k| vectors.iter().map(|v| v[k]).sum::<f64>() / vectors.len() as f64).collect())
    }

    /// Mixture weights over named concepts for a condition vector.
    pub fn concept_weights(&self, condition: &[f64]) -> Vec<f64> {
        project_to_hull(&self.atoms, condition)
    }

    fn decode_vector(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        match &image.payload {
            ImagePayload::Vector(v) if v.len() == self.space.dimension => Ok(v.iter().map(|&x| x as f64).collect()),
            ImagePayload::Vector(v) => Err(BackendError::Decode {
                id: image.id.clone(),
                reason: format!("vector of length {}, expected {}", v.len(), self.space.dimension),
            }),
            ImagePayload::Png(_) => Err(BackendError::Decode {
                id: image.id.clone(),
                reason: "synthetic backend only reads vector payloads".into(),
            }),
        }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> String {
        format!("mock-d{}", self.space.dimension)
    }

    fn base_vocabulary(&self) -> Arc<BaseVocabulary> {
        Arc::clone(&self.vocabulary)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_dim(&self) -> usize {
        self.space.dimension
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        self.decode_vector(image)
    }

    fn loss_and_gradient(
        &self,
        batch: &BackendBatch,
        dict: &TokenDictionary,
        trainable: &[String],
    ) -> Result<TrainStepResult, BackendError> {
        check_trainable(dict, trainable)?;
        let placeholders = prompt_placeholders(&batch.prompt);
        let slots: Vec<Vec<f64>> = placeholders
            .iter()
            .map(|p| {
                dict.injected()
                    .get(p)
                    .map(EmbeddingVector::to_f64)
                    .ok_or_else(|| BackendError::UnresolvablePrompt(batch.prompt.clone()))
            })
            .collect::<Result<_, _>>()?;
        let (loss, slot_grads) = self.batch_loss_and_slot_gradients(batch, &slots)?;
        let mut gradients: BTreeMap<String, Vec<f64>> =
            trainable.iter().map(|t| (t.clone(), vec![0.0; self.space.dimension])).collect();
        for (p, g) in placeholders.iter().zip(slot_grads) {
            if let Some(acc) = gradients.get_mut(p) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(TrainStepResult { loss, gradients })
    }

    fn generate(&self, prompt: &str, dict: &TokenDictionary, seed: u64, n: usize) -> Result<ImageSet, BackendError> {
        if n == 0 {
            return Err(BackendError::Generation("n must be at least 1".into()));
        }
        let c = self.condition(prompt, dict)?;
        let weights = self.concept_weights(&c);
        let dim = self.space.dimension;
        let mut residual = c.clone();
        for (w, atom) in weights.iter().zip(&self.atoms) {
            for k in 0..dim {
                residual[k] -= w * atom[k];
            }
        }
        let mut rng = seeded_rng(&[b"generate", &seed.to_le_bytes(), prompt.as_bytes()]);
        // Systematic sampling of concept picks: image k takes the concept
        // whose cumulative weight first exceeds (k + u) / n, so the pick
        // counts match the weights up to rounding.
        let offset: f64 = rng.random();
        let images = (0..n)
            .map(|k| {
                let base: Vec<f64> = if self.atoms.is_empty() {
                    c.clone()
                } else {
                    let q = (k as f64 + offset) / n as f64;
                    let mut acc = 0.0;
                    let mut pick = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if q < acc {
                            pick = i;
                            break;
                        }
                    }
                    self.atoms[pick].iter().zip(&residual).map(|(a, r)| a + r).collect()
                };
                let values: Vec<f32> = base
                    .iter()
                    .map(|b| (b + self.space.sigma_gen * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                ImageRef::generated(ImagePayload::Vector(values.into()), seed, prompt)
            })
            .collect();
        Ok(ImageSet::new(images))
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, BackendError> {
        let v = self.decode_vector(image)?;
        EmbeddingVector::from_f64(&v).map_err(|e| BackendError::Decode { id: image.id.clone(), reason: e.to_string() })
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Weights `w` on the simplex minimizing `|sum_i w_i atoms_i - target|^2`
/// (accelerated projected gradient).
pub fn project_to_hull(atoms: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let m = atoms.len();
    if m == 0 {
        return Vec::new();
    }
    if m == 1 {
        return vec![1.0];
    }
    let gram: Vec<Vec<f64>> = atoms.iter().map(|a| atoms.iter().map(|b| dot(a, b)).collect()).collect();
    let at: Vec<f64> = atoms.iter().map(|a| dot(a, target)).collect();
    // Largest eigenvalue of the Gram matrix by power iteration.
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut lipschitz = 0.0;
    for _ in 0..100 {
        let gv: Vec<f64> = gram.iter().map(|row| dot(row, &v)).collect();
        let norm = dot(&gv, &gv).sqrt();
        if norm == 0.0 {
            break;
        }
        lipschitz = norm;
        v = gv.iter().map(|x| x / norm).collect();
    }
    let step = 1.0 / (lipschitz * 1.01).max(1e-12);
    let mut w = vec![1.0 / m as f64; m];
    let mut y = w.clone();
    let mut momentum = 1.0f64;
    for _ in 0..3000 {
        let grad: Vec<f64> = gram.iter().zip(&at).map(|(row, b)| dot(row, &y) - b).collect();
        let next = project_simplex(&y.iter().zip(&grad).map(|(yi, gi)| yi - step * gi).collect::<Vec<_>>());
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        y = next.iter().zip(&w).map(|(n, o)| n + beta * (n - o)).collect();
        let delta: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        w = next;
        momentum = next_momentum;
        if delta < 1e-15 {
            break;
        }
    }
    let cleaned: Vec<f64> = w.iter().map(|&x| if x < 1e-9 { 0.0 } else { x }).collect();
    let total: f64 = cleaned.iter().sum();
    cleaned.iter().map(|x| x / total).collect()
}
