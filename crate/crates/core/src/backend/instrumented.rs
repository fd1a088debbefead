//! Backend wrapper that counts calls and can inject failures, for tests and
//! failure drills.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{Backend, BackendBatch, BackendError, NoiseSchedule, TrainStepResult};
use crate::dictionary::{BaseVocabulary, TokenDictionary};
use crate::embedding::EmbeddingVector;
use crate::image::{ImageRef, ImageSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Training calls after the first `n` return an error.
    FailTrainingAfter(usize),
    /// Training calls after the first `n` panic.
    PanicTrainingAfter(usize),
    /// Generation calls after the first `n` return an error.
    FailGenerateAfter(usize),
}

#[derive(Debug, Default)]
pub struct CallCounts {
    pub encode: AtomicUsize,
    pub train: AtomicUsize,
    pub generate: AtomicUsize,
    pub embed: AtomicUsize,
}

impl CallCounts {
    pub fn get(counter: &AtomicUsize) -> usize {
        counter.load(Ordering::SeqCst)
    }
}

pub struct InstrumentedBackend {
    inner: Arc<dyn Backend>,
    fault: Fault,
    counts: Arc<CallCounts>,
}

impl InstrumentedBackend {
    pub fn new(inner: Arc<dyn Backend>, fault: Fault) -> Self {
        Self { inner, fault, counts: Arc::default() }
    }

    pub fn counts(&self) -> Arc<CallCounts> {
        Arc::clone(&self.counts)
    }
}

impl Backend for InstrumentedBackend {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn base_vocabulary(&self) -> Arc<BaseVocabulary> {
        self.inner.base_vocabulary()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        self.counts.encode.fetch_add(1, Ordering::SeqCst);
        self.inner.encode_image(image)
    }

    fn loss_and_gradient(
        &self,
        batch: &BackendBatch,
        dict: &TokenDictionary,
        trainable: &[String],
    ) -> Result<TrainStepResult, BackendError> {
        let n = self.counts.train.fetch_add(1, Ordering::SeqCst);
        match self.fault {
            Fault::FailTrainingAfter(limit) if n >= limit => {
                return Err(BackendError::Remote(format!("injected failure at training call {}", n + 1)))
            }
            Fault::PanicTrainingAfter(limit) if n >= limit => panic!("injected panic at training call {}", n + 1),
            _ => {}
        }
        self.inner.loss_and_gradient(batch, dict, trainable)
    }

    fn generate(&self, prompt: &str, dict: &TokenDictionary, seed: u64, n: usize) -> Result<ImageSet, BackendError> {
        let calls = self.counts.generate.fetch_add(1, Ordering::SeqCst);
        if let Fault::FailGenerateAfter(limit) = self.fault {
            if calls >= limit {
                return Err(BackendError::Generation(format!("injected failure at generation call {}", calls + 1)));
            }
        }
        self.inner.generate(prompt, dict, seed, n)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, BackendError> {
        self.counts.embed.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_image(image)
    }

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.counts.embed.fetch_add(images.len(), Ordering::SeqCst);
        self.inner.embed_images(images)
    }

    fn weights_checksum(&self) -> String {
        self.inner.weights_checksum()
    }
}
