//! Decomposition of a visual concept into a binary tree of learned token
//! embeddings.
//!
//! A small image set is split recursively: two sibling placeholder tokens are
//! fitted jointly so that together they reconstruct their parent, several
//! seeded candidate pairs are scored with a CLIP-style set-consistency measure,
//! and the best pair becomes the next level of the tree. The resulting tree is
//! persisted as a self-contained archive and can be explored by composing
//! prompts from tokens of one or several trees.
//!
//! The text-to-image system sits behind the [`backend::Backend`] trait. A
//! deterministic synthetic backend ([`backend::mock::MockBackend`]) makes every
//! algorithmic step checkable at desk scale.

pub mod backend;
pub mod builder;
pub mod codec;
pub mod config;
pub mod dictionary;
pub mod embedding;
pub mod events;
pub mod fixtures;
pub mod image;
pub mod report;
pub mod scoring;
pub mod store;
pub mod timestep;
pub mod trainer;
pub mod tree;

pub use backend::{Backend, BackendError};
pub use builder::{BuildError, TreeBuilder};
pub use config::{BuildConfig, ConfigError};
pub use dictionary::{compose_prompt, placeholder_name, BaseVocabulary, DictionaryError, TokenDictionary};
pub use embedding::{EmbeddingError, EmbeddingVector};
pub use events::{BuildEvent, EventSink};
pub use image::{ImagePayload, ImageRef, ImageSet, ImageSource};
pub use report::{CandidatePair, ConsistencyReport, StopDecision};
pub use scoring::{ConsistencyError, ConsistencyMatrix, Scorer};
pub use store::{load_tree, save_tree, StoreError};
pub use timestep::{SamplerError, TimestepDistribution};
pub use trainer::{TrainError, TrainJob};
pub use tree::{validate_tree, ConceptNode, ConceptTree, NodeStatus, SplitDecision, SplitRecord, Violation};
