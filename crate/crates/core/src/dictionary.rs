//! The layered word → embedding lookup table and prompt composition.
//!
//! The base layer is the backend's frozen vocabulary and is shared by
//! reference. Placeholder tokens live in a separate injected layer; every
//! update produces a new dictionary value so concurrent jobs can each own an
//! isolated clone.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DictionaryError {
    #[error("token list is empty")]
    EmptyTokenList,
    #[error("token {0:?} already exists or is repeated")]
    DuplicateToken(String),
    #[error("init word {0:?} is not in the base vocabulary")]
    UnknownInitWord(String),
    #[error("injected tokens collide: {0:?}")]
    KeyCollision(Vec<String>),
    #[error("base vocabularies differ ({left} vs {right})")]
    BaseMismatch { left: String, right: String },
    #[error("{0:?} belongs to the frozen base vocabulary")]
    FrozenToken(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("template has {slots} slot(s) but {tokens} token(s) were given")]
    ArityMismatch { slots: usize, tokens: usize },
    #[error("invalid placeholder name {0:?}")]
    InvalidPlaceholder(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Placeholder word for a node of a tree. Tree-prefixed names keep merges of
/// different trees collision-free.
pub fn placeholder_name(tree_id: &str, node_id: u32) -> String {
    format!("{tree_id}_v{node_id}")
}

/// How a placeholder appears inside prompt text.
pub fn render_placeholder(name: &str) -> String {
    format!("<{name}>")
}

pub fn is_valid_placeholder(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// The backend's frozen vocabulary.
#[derive(Debug, PartialEq)]
pub struct BaseVocabulary {
    fingerprint: String,
    embed_dim: usize,
    words: BTreeMap<String, EmbeddingVector>,
    detached: bool,
}

impl BaseVocabulary {
    pub fn new(embed_dim: usize, words: BTreeMap<String, EmbeddingVector>) -> Result<Self, DictionaryError> {
        for v in words.values() {
            v.check_dim(embed_dim)?;
        }
        let fingerprint = content_checksum(embed_dim, &words);
        Ok(Self { fingerprint, embed_dim, words, detached: false })
    }

    /// Stand-in used when a tree is loaded without a backend: it remembers
    /// which vocabulary the tree was built against but holds no words.
    pub fn detached(fingerprint: impl Into<String>, embed_dim: usize) -> Self {
        Self { fingerprint: fingerprint.into(), embed_dim, words: BTreeMap::new(), detached: true }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn get(&self, word: &str) -> Option<&EmbeddingVector> {
        self.words.get(word)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Hash of the current contents. Equals the fingerprint for an attached
    /// vocabulary that has not been tampered with.
    pub fn checksum(&self) -> String {
        content_checksum(self.embed_dim, &self.words)
    }
}

fn content_checksum(embed_dim: usize, words: &BTreeMap<String, EmbeddingVector>) -> String {
    let mut h = Sha256::new();
    h.update((embed_dim as u64).to_le_bytes());
    for (w, v) in words {
        h.update((w.len() as u64).to_le_bytes());
        h.update(w.as_bytes());
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct TokenDictionary {
    base: Arc<BaseVocabulary>,
    injected: Arc<BTreeMap<String, EmbeddingVector>>,
}

/// Bases compare by fingerprint, so a dictionary loaded without a backend
/// equals the one it was saved from.
impl PartialEq for TokenDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.base.fingerprint() == other.base.fingerprint()
            && self.embed_dim() == other.embed_dim()
            && self.injected == other.injected
    }
}

impl TokenDictionary {
    pub fn new(base: Arc<BaseVocabulary>) -> Self {
        Self { base, injected: Arc::default() }
    }

    /// Rebuilds a dictionary from persisted injected tokens.
    pub fn from_parts(
        base: Arc<BaseVocabulary>,
        injected: BTreeMap<String, EmbeddingVector>,
    ) -> Result<Self, DictionaryError> {
        for (token, v) in &injected {
            if !is_valid_placeholder(token) {
                return Err(DictionaryError::InvalidPlaceholder(token.clone()));
            }
            if base.contains(token) {
                return Err(DictionaryError::FrozenToken(token.clone()));
            }
            v.check_dim(base.embed_dim())?;
        }
        Ok(Self { base, injected: Arc::new(injected) })
    }

    pub fn base(&self) -> &Arc<BaseVocabulary> {
        &self.base
    }

    pub fn embed_dim(&self) -> usize {
        self.base.embed_dim()
    }

    pub fn injected(&self) -> &BTreeMap<String, EmbeddingVector> {
        &self.injected
    }

    pub fn injected_len(&self) -> usize {
        self.injected.len()
    }

    pub fn is_injected(&self, token: &str) -> bool {
        self.injected.contains_key(token)
    }

    /// Looks a word up in the injected layer, then in the base layer.
    pub fn get(&self, word: &str) -> Option<&EmbeddingVector> {
        self.injected.get(word).or_else(|| self.base.get(word))
    }

    /// Adds new placeholder tokens, each initialized to a copy of the init
    /// word's embedding.
    pub fn extend<S: AsRef<str>>(&self, tokens: &[S], init_word: &str) -> Result<Self, DictionaryError> {
        if tokens.is_empty() {
            return Err(DictionaryError::EmptyTokenList);
        }
        let init = self
            .base
            .get(init_word)
            .ok_or_else(|| DictionaryError::UnknownInitWord(init_word.to_owned()))?
            .clone();
        let mut injected = (*self.injected).clone();
        for token in tokens {
            let token = token.as_ref();
            if !is_valid_placeholder(token) {
                return Err(DictionaryError::InvalidPlaceholder(token.to_owned()));
            }
            if self.base.contains(token) || injected.contains_key(token) {
                return Err(DictionaryError::DuplicateToken(token.to_owned()));
            }
            injected.insert(token.to_owned(), init.clone());
        }
        Ok(Self { base: Arc::clone(&self.base), injected: Arc::new(injected) })
    }

    /// Union of the injected layers of two dictionaries over the same base.
    pub fn merge(&self, other: &TokenDictionary) -> Result<Self, DictionaryError> {
        if self.base.fingerprint() != other.base.fingerprint() || self.embed_dim() != other.embed_dim() {
            return Err(DictionaryError::BaseMismatch {
                left: self.base.fingerprint().to_owned(),
                right: other.base.fingerprint().to_owned(),
            });
        }
        let collisions: Vec<String> =
            other.injected.keys().filter(|k| self.injected.contains_key(*k)).cloned().collect();
        if !collisions.is_empty() {
            return Err(DictionaryError::KeyCollision(collisions));
        }
        let mut injected = (*self.injected).clone();
        injected.extend(other.injected.iter().map(|(k, v)| (k.clone(), v.clone())));
        // Prefer an attached base when one side was loaded without a backend.
        let base = if self.base.is_detached() { &other.base } else { &self.base };
        Ok(Self { base: Arc::clone(base), injected: Arc::new(injected) })
    }

    /// Returns a new dictionary where only `token`'s vector differs.
    pub fn update_embedding(&self, token: &str, vector: EmbeddingVector) -> Result<Self, DictionaryError> {
        let mut next = self.clone();
        next.set_embedding(token, vector)?;
        Ok(next)
    }

    /// In-place variant of [`update_embedding`](Self::update_embedding); copies
    /// the injected layer only if it is shared.
    pub fn set_embedding(&mut self, token: &str, vector: EmbeddingVector) -> Result<(), DictionaryError> {
        if self.base.contains(token) {
            return Err(DictionaryError::FrozenToken(token.to_owned()));
        }
        if !self.injected.contains_key(token) {
            return Err(DictionaryError::UnknownToken(token.to_owned()));
        }
        vector.check_dim(self.embed_dim())?;
        Arc::make_mut(&mut self.injected).insert(token.to_owned(), vector);
        Ok(())
    }

    /// Drops injected tokens (used to roll back a failed split).
    pub fn without<S: AsRef<str>>(&self, tokens: &[S]) -> Self {
        let mut injected = (*self.injected).clone();
        for t in tokens {
            injected.remove(t.as_ref());
        }
        Self { base: Arc::clone(&self.base), injected: Arc::new(injected) }
    }

    /// Swaps in a live base vocabulary with the same fingerprint.
    pub fn attach_base(&self, base: Arc<BaseVocabulary>) -> Result<Self, DictionaryError> {
        if base.fingerprint() != self.base.fingerprint() || base.embed_dim() != self.embed_dim() {
            return Err(DictionaryError::BaseMismatch {
                left: self.base.fingerprint().to_owned(),
                right: base.fingerprint().to_owned(),
            });
        }
        Self::from_parts(base, (*self.injected).clone())
    }

    /// Vocabulary-checksum of the frozen layer.
    pub fn base_checksum(&self) -> String {
        self.base.checksum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptToken {
    Placeholder(String),
    Word(String),
}

/// Whitespace tokenizer. `<name>` is one atomic placeholder; other words are
/// lowercased with surrounding punctuation stripped.
pub fn tokenize(prompt: &str) -> Vec<PromptToken> {
    prompt
        .split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_end_matches([',', '.', ';', ':', '!', '?']);
            if let Some(inner) = trimmed.strip_prefix('<').and_then(|s| s.strip_suffix('>')) {
                if is_valid_placeholder(inner) {
                    return Some(PromptToken::Placeholder(inner.to_owned()));
                }
            }
            let word: String =
                trimmed.chars().filter(|c| c.is_alphanumeric() || *c == '-' || *c == '\'').collect();
            (!word.is_empty()).then(|| PromptToken::Word(word.to_lowercase()))
        })
        .collect()
}

/// Placeholder names appearing in a prompt, in order.
pub fn prompt_placeholders(prompt: &str) -> Vec<String> {
    tokenize(prompt)
        .into_iter()
        .filter_map(|t| match t {
            PromptToken::Placeholder(p) => Some(p),
            PromptToken::Word(_) => None,
        })
        .collect()
}

/// Byte ranges of `{slot}` groups in a template.
fn slot_spans(template: &str) -> Vec<(usize, usize)> {
    let bytes = template.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' {
                spans.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

pub fn template_slots(template: &str) -> usize {
    slot_spans(template).len()
}

/// Positional substitution of already-rendered strings into the slots.
pub fn fill_template<S: AsRef<str>>(template: &str, values: &[S]) -> Result<String, DictionaryError> {
    let spans = slot_spans(template);
    if spans.len() != values.len() {
        return Err(DictionaryError::ArityMismatch { slots: spans.len(), tokens: values.len() });
    }
    let mut out = String::with_capacity(template.len() + 16 * values.len());
    let mut last = 0;
    for ((start, end), value) in spans.into_iter().zip(values) {
        out.push_str(&template[last..start]);
        out.push_str(value.as_ref());
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Fills a template with tokens. Injected tokens render as `<name>`; base
/// words are inserted verbatim.
pub fn compose_prompt<S: AsRef<str>>(
    dict: &TokenDictionary,
    template: &str,
    tokens: &[S],
) -> Result<String, DictionaryError> {
    let slots = template_slots(template);
    if slots != tokens.len() {
        return Err(DictionaryError::ArityMismatch { slots, tokens: tokens.len() });
    }
    let rendered = tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if dict.is_injected(t) {
                Ok(render_placeholder(t))
            } else if dict.base().contains(t) {
                Ok(t.to_owned())
            } else {
                Err(DictionaryError::UnknownToken(t.to_owned()))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    fill_template(template, &rendered)
}
