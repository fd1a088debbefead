use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{self, MAGIC_IMAGE};
use crate::embedding::EmbeddingVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSource {
    UserProvided,
    Generated,
}

/// Image content. Synthetic images carry their concept-space vector directly.
#[derive(Clone, Debug, PartialEq)]
pub enum ImagePayload {
    Vector(Arc<[f32]>),
    Png(Arc<[u8]>),
}

impl ImagePayload {
    /// Bytes as they are written to disk.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        match self {
            ImagePayload::Vector(v) => codec::encode_vector(MAGIC_IMAGE, v),
            ImagePayload::Png(bytes) => bytes.to_vec(),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ImagePayload::Vector(_) => "vec",
            ImagePayload::Png(_) => "png",
        }
    }

    /// Parses file bytes by extension (`vec` or `png`).
    pub fn from_file_bytes(extension: &str, bytes: Vec<u8>) -> Option<Self> {
        match extension {
            "vec" => Some(ImagePayload::Vector(bytes_to_vector(&bytes)?.into())),
            "png" => Some(ImagePayload::Png(bytes.into())),
            _ => None,
        }
    }
}

fn bytes_to_vector(bytes: &[u8]) -> Option<Vec<f32>> {
    codec::decode_vector(MAGIC_IMAGE, bytes).ok()
}

/// One image, user-provided or generated. The id is a content hash so that
/// embedding caches keyed by id can never serve a stale entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRef {
    pub id: String,
    pub payload: ImagePayload,
    pub source: ImageSource,
    pub seed: Option<u64>,
    pub prompt: Option<String>,
}

impl ImageRef {
    pub fn user(payload: ImagePayload) -> Self {
        Self { id: content_id(&payload), payload, source: ImageSource::UserProvided, seed: None, prompt: None }
    }

    pub fn generated(payload: ImagePayload, seed: u64, prompt: impl Into<String>) -> Self {
        Self {
            id: content_id(&payload),
            payload,
            source: ImageSource::Generated,
            seed: Some(seed),
            prompt: Some(prompt.into()),
        }
    }

    pub fn user_vector(values: Vec<f32>) -> Self {
        Self::user(ImagePayload::Vector(values.into()))
    }

    /// Generated images carry seed and prompt; user images carry neither.
    pub fn provenance_is_consistent(&self) -> bool {
        match self.source {
            ImageSource::Generated => self.seed.is_some() && self.prompt.is_some(),
            ImageSource::UserProvided => self.seed.is_none() && self.prompt.is_none(),
        }
    }
}

fn content_id(payload: &ImagePayload) -> String {
    let digest = Sha256::digest(payload.to_file_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Ordered images plus an optional, lazily filled embedding cache.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    images: Vec<ImageRef>,
    embeddings: OnceLock<Vec<EmbeddingVector>>,
}

impl ImageSet {
    pub fn new(images: Vec<ImageRef>) -> Self {
        Self { images, embeddings: OnceLock::new() }
    }

    /// Builds a set with a pre-filled cache. Returns `None` if the row count
    /// differs from the image count.
    pub fn with_embeddings(images: Vec<ImageRef>, embeddings: Vec<EmbeddingVector>) -> Option<Self> {
        if images.len() != embeddings.len() {
            return None;
        }
        let cell = OnceLock::new();
        let _ = cell.set(embeddings);
        Some(Self { images, embeddings: cell })
    }

    pub fn images(&self) -> &[ImageRef] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn cached_embeddings(&self) -> Option<&[EmbeddingVector]> {
        self.embeddings.get().map(Vec::as_slice)
    }

    /// Fills the cache once; later calls return the first value.
    pub fn cache_embeddings<E>(
        &self,
        compute: impl FnOnce(&[ImageRef]) -> Result<Vec<EmbeddingVector>, E>,
    ) -> Result<&[EmbeddingVector], E> {
        if let Some(e) = self.embeddings.get() {
            return Ok(e);
        }
        let computed = compute(&self.images)?;
        debug_assert_eq!(computed.len(), self.images.len());
        Ok(self.embeddings.get_or_init(|| computed))
    }

    /// Same images in a new order (indices into this set).
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        match self.cached_embeddings() {
            Some(e) => {
                let rows = indices.iter().map(|&i| e[i].clone()).collect();
                ImageSet::with_embeddings(images, rows).expect("row count matches")
            }
            None => ImageSet::new(images),
        }
    }

    /// True when both sets list the same images in the same order.
    pub fn same_images(&self, other: &ImageSet) -> bool {
        self.images.len() == other.images.len()
            && self.images.iter().zip(&other.images).all(|(a, b)| a.id == b.id)
    }
}

/// Equality over the images only; the cache is derived data.
impl PartialEq for ImageSet {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
    }
}

impl FromIterator<ImageRef> for ImageSet {
    fn from_iter<T: IntoIterator<Item = ImageRef>>(iter: T) -> Self {
        ImageSet::new(iter.into_iter().collect())
    }
}
