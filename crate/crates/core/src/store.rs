//! On-disk tree archive.
//!
//! ```text
//! <tree-id>/manifest.json
//! <tree-id>/embeddings/<token>.bin
//! <tree-id>/images/<node-id>/<n>.<vec|png>           (root images under node 0)
//! <tree-id>/images/<node-id>/scoring/<n>.<vec|png>
//! <tree-id>/images/<...>/embeddings.bin                (cached image embeddings)
//! ```
//!
//! The manifest lists every file with its SHA-256. Archives are written to a
//! temporary sibling directory and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, CodecError, MAGIC_EMBEDDING, MAGIC_MATRIX};
use crate::config::BuildConfig;
use crate::dictionary::{BaseVocabulary, DictionaryError, TokenDictionary};
use crate::embedding::EmbeddingVector;
use crate::image::{ImagePayload, ImageRef, ImageSet, ImageSource};
use crate::tree::{validate_tree, ConceptNode, ConceptTree, NodeStatus, SplitRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("archive schema version {found} is not supported (this build reads version {supported})")]
    Version { found: u64, supported: u32 },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: CodecError },
    #[error("invalid archive content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileEntry {
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    file: String,
    sha256: String,
    source: ImageSource,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ImageSetEntry {
    images: Vec<ImageEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    embeddings: Option<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TokenEntry {
    token: String,
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NodeEntry {
    id: u32,
    token: Option<String>,
    parent: Option<u32>,
    children: Vec<u32>,
    depth: u32,
    status: NodeStatus,
    self_consistency: Option<f64>,
    sibling_cross_consistency: Option<f64>,
    samples: ImageSetEntry,
    score_samples: ImageSetEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabularyEntry {
    fingerprint: String,
    embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    tree_id: String,
    backend: String,
    base_vocabulary: VocabularyEntry,
    config: BuildConfig,
    root_images: ImageSetEntry,
    tokens: Vec<TokenEntry>,
    nodes: Vec<NodeEntry>,
    build_log: Vec<SplitRecord>,
}

/// Directory of a tree inside a trees directory.
pub fn archive_path(trees_dir: &Path, tree_id: &str) -> PathBuf {
    trees_dir.join(tree_id)
}

struct Writer {
    root: PathBuf,
}

impl Writer {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String, StoreError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(sha256_hex(bytes))
    }

    fn image_set(&self, dir: &str, set: &ImageSet) -> Result<ImageSetEntry, StoreError> {
        let mut images = Vec::with_capacity(set.len());
        for (n, im) in set.images().iter().enumerate() {
            let file = format!("{dir}/{n}.{}", im.payload.extension());
            let sha256 = self.write(&file, &im.payload.to_file_bytes())?;
            images.push(ImageEntry {
                id: im.id.clone(),
                file,
                sha256,
                source: im.source,
                seed: im.seed,
                prompt: im.prompt.clone(),
            });
        }
        let embeddings = match set.cached_embeddings() {
            Some(rows) if !rows.is_empty() => {
                let dim = rows[0].dim();
                let slices: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                let file = format!("{dir}/embeddings.bin");
                let sha256 = self.write(&file, &codec::encode_rows(MAGIC_MATRIX, dim, &slices))?;
                Some(FileEntry { file, sha256 })
            }
            _ => None,
        };
        Ok(ImageSetEntry { images, embeddings })
    }
}

fn manifest_bytes(tree: &ConceptTree, w: &Writer) -> Result<Vec<u8>, StoreError> {
    let mut tokens = Vec::new();
    for (token, v) in tree.dictionary.injected() {
        let file = format!("embeddings/{token}.bin");
        let sha256 = w.write(&file, &codec::encode_vector(MAGIC_EMBEDDING, v.as_slice()))?;
        tokens.push(TokenEntry { token: token.clone(), file, sha256 });
    }
    let mut nodes = Vec::new();
    for node in tree.nodes.values() {
        let samples = w.image_set(&format!("images/{}", node.id), &node.samples)?;
        nodes.push(NodeEntry {
            id: node.id,
            token: node.token.clone(),
            parent: node.parent,
            children: node.children.clone(),
            depth: node.depth,
            status: node.status,
            self_consistency: node.self_consistency,
            sibling_cross_consistency: node.sibling_cross_consistency,
            samples,
            score_samples: w.image_set(&format!("images/{}/scoring", node.id), &node.score_samples)?,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tree_id: tree.tree_id.clone(),
        backend: tree.backend.clone(),
        base_vocabulary: VocabularyEntry {
            fingerprint: tree.dictionary.base().fingerprint().to_owned(),
            embed_dim: tree.dictionary.embed_dim(),
        },
        config: tree.config.clone(),
        root_images: w.image_set("images/0", &tree.root_images)?,
        tokens,
        nodes,
        build_log: tree.build_log.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `tree` as an archive at `dir`, replacing any previous archive there
/// only once the new one is complete.
pub fn save_tree(tree: &ConceptTree, dir: &Path) -> Result<PathBuf, StoreError> {
    let violations = validate_tree(tree);
    if let Some(v) = violations.first() {
        return Err(StoreError::Invalid(format!("{} (node {:?})", v.message, v.node)));
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = dir.file_name().ok_or_else(|| StoreError::Invalid(format!("bad archive path {}", dir.display())))?;
    let stamp = format!("{}-{}", std::process::id(), unique_suffix());
    let tmp = parent.join(format!(".{}.tmp-{stamp}", name.to_string_lossy()));
    let writer = Writer { root: tmp.clone() };
    let result = manifest_bytes(tree, &writer).and_then(|m| writer.write(MANIFEST, &m).map(|_| ()));
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = parent.join(format!(".{}.old-{stamp}", name.to_string_lossy()));
    let had_old = dir.exists();
    if had_old {
        fs::rename(dir, &old).map_err(io_err(dir))?;
    }
    if let Err(source) = fs::rename(&tmp, dir) {
        if had_old {
            let _ = fs::rename(&old, dir);
        }
        let _ = fs::remove_dir_all(&tmp);
        return Err(StoreError::Io { path: dir.to_owned(), source });
    }
    if had_old {
        let _ = fs::remove_dir_all(&old);
    }
    Ok(dir.to_owned())
}

fn unique_suffix() -> u128 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    nanos ^ (COUNTER.fetch_add(1, Ordering::Relaxed) as u128) << 96
}

struct Reader<'a> {
    root: &'a Path,
}

impl Reader<'_> {
    fn read(&self, rel: &str, sha256: &str) -> Result<Vec<u8>, StoreError> {
        if rel.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(StoreError::Manifest(format!("illegal file reference {rel:?}")));
        }
        let path = self.root.join(rel);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::MissingFile(path)),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        if sha256_hex(&bytes) != sha256 {
            return Err(StoreError::Checksum(path));
        }
        Ok(bytes)
    }

    fn image_set(&self, entry: &ImageSetEntry) -> Result<ImageSet, StoreError> {
        let mut images = Vec::with_capacity(entry.images.len());
        for e in &entry.images {
            let bytes = self.read(&e.file, &e.sha256)?;
            let ext = e.file.rsplit('.').next().unwrap_or_default();
            let payload = ImagePayload::from_file_bytes(ext, bytes)
                .ok_or_else(|| StoreError::Invalid(format!("unreadable image file {}", e.file)))?;
            let image = ImageRef { id: e.id.clone(), payload, source: e.source, seed: e.seed, prompt: e.prompt.clone() };
            if !image.provenance_is_consistent() {
                return Err(StoreError::Invalid(format!("image {} has inconsistent provenance", e.id)));
            }
            images.push(image);
        }
        match &entry.embeddings {
            None => Ok(ImageSet::new(images)),
            Some(f) => {
                let bytes = self.read(&f.file, &f.sha256)?;
                let path = self.root.join(&f.file);
                let (dim, flat) = codec::decode_rows(MAGIC_MATRIX, &bytes)
                    .map_err(|source| StoreError::Codec { path: path.clone(), source })?;
                let rows = flat
                    .chunks(dim)
                    .map(|c| EmbeddingVector::new(c.to_vec()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| StoreError::Invalid(format!("{}: {e}", f.file)))?;
                ImageSet::with_embeddings(images, rows)
                    .ok_or_else(|| StoreError::Invalid(format!("{} row count differs from image count", f.file)))
            }
        }
    }
}

/// Reads the schema version without interpreting the rest of the manifest.
pub fn read_schema_version(dir: &Path) -> Result<u64, StoreError> {
    let path = dir.join(MANIFEST);
    let value = read_manifest_value(&path)?;
    value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| StoreError::Manifest("schema_version missing".into()))
}

fn read_manifest_value(path: &Path) -> Result<serde_json::Value, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::MissingFile(path.to_owned())),
        Err(e) => return Err(StoreError::Io { path: path.to_owned(), source: e }),
    };
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest(e.to_string()))
}

/// Loads an archive. The dictionary's frozen layer is a detached placeholder
/// carrying only the vocabulary fingerprint; see [`load_tree_with_base`].
pub fn load_tree(dir: &Path) -> Result<ConceptTree, StoreError> {
    let value = read_manifest_value(&dir.join(MANIFEST))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| StoreError::Manifest("schema_version missing".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(StoreError::Version { found: version, supported: SCHEMA_VERSION });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| StoreError::Manifest(e.to_string()))?;
    m.config.validate().map_err(|e| StoreError::Invalid(format!("config: {e}")))?;
    let reader = Reader { root: dir };

    let dim = m.base_vocabulary.embed_dim;
    let mut injected = BTreeMap::new();
    for t in &m.tokens {
        let bytes = reader.read(&t.file, &t.sha256)?;
        let values = codec::decode_vector(MAGIC_EMBEDDING, &bytes)
            .map_err(|source| StoreError::Codec { path: dir.join(&t.file), source })?;
        if values.len() != dim {
            return Err(StoreError::Invalid(format!("{} has dimension {}, expected {dim}", t.file, values.len())));
        }
        let v = EmbeddingVector::new(values).map_err(|e| StoreError::Invalid(format!("{}: {e}", t.file)))?;
        injected.insert(t.token.clone(), v);
    }
    let base = Arc::new(BaseVocabulary::detached(m.base_vocabulary.fingerprint.clone(), dim));
    let dictionary = TokenDictionary::from_parts(base, injected)?;

    let mut nodes = BTreeMap::new();
    for n in &m.nodes {
        let embedding = match &n.token {
            Some(t) => Some(
                dictionary
                    .injected()
                    .get(t)
                    .cloned()
                    .ok_or_else(|| StoreError::Invalid(format!("node {} token {t:?} has no embedding file", n.id)))?,
            ),
            None => None,
        };
        let node = ConceptNode {
            id: n.id,
            token: n.token.clone(),
            embedding,
            parent: n.parent,
            children: n.children.clone(),
            depth: n.depth,
            samples: reader.image_set(&n.samples)?,
            score_samples: reader.image_set(&n.score_samples)?,
            self_consistency: n.self_consistency,
            sibling_cross_consistency: n.sibling_cross_consistency,
            status: n.status,
        };
        if nodes.insert(n.id, node).is_some() {
            return Err(StoreError::Invalid(format!("duplicate node id {}", n.id)));
        }
    }
    let tree = ConceptTree {
        tree_id: m.tree_id,
        root_images: reader.image_set(&m.root_images)?,
        nodes,
        dictionary,
        config: m.config,
        build_log: m.build_log,
        backend: m.backend,
    };
    if let Some(v) = validate_tree(&tree).first() {
        return Err(StoreError::Invalid(format!("{} (node {:?})", v.message, v.node)));
    }
    Ok(tree)
}

/// Loads an archive and attaches a live base vocabulary, which must have the
/// fingerprint recorded at save time.
pub fn load_tree_with_base(dir: &Path, base: Arc<BaseVocabulary>) -> Result<ConceptTree, StoreError> {
    let mut tree = load_tree(dir)?;
    tree.dictionary = tree.dictionary.attach_base(base)?;
    Ok(tree)
}

/// Tree ids of every archive directly under `trees_dir`, sorted.
pub fn list_archives(trees_dir: &Path) -> Result<Vec<String>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(trees_dir).map_err(io_err(trees_dir))? {
        let entry = entry.map_err(io_err(trees_dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && entry.path().join(MANIFEST).is_file() {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsupported_version_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), br#"{"schema_version": 0, "tree_id": "x"}"#).unwrap();
        match load_tree(dir.path()) {
            Err(StoreError::Version { found: 0, supported: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_tree(dir.path()), Err(StoreError::MissingFile(_))));
    }
}
