//! Concept tree, split records and structural validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::BuildConfig;
use crate::dictionary::TokenDictionary;
use crate::embedding::EmbeddingVector;
use crate::image::ImageSet;
use crate::report::{ConsistencyReport, StopDecision};

pub const ROOT_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Root,
    Active,
    LeafStopped,
    LeafIncoherent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptNode {
    pub id: u32,
    /// Placeholder word; `None` only for the root.
    pub token: Option<String>,
    pub embedding: Option<EmbeddingVector>,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub depth: u32,
    /// Curated images shown for the node; also the training set of its split.
    pub samples: ImageSet,
    /// Full generated set the node's scores were computed on.
    pub score_samples: ImageSet,
    pub self_consistency: Option<f64>,
    pub sibling_cross_consistency: Option<f64>,
    pub status: NodeStatus,
}

impl ConceptNode {
    pub fn root() -> Self {
        Self {
            id: ROOT_ID,
            token: None,
            embedding: None,
            parent: None,
            children: Vec::new(),
            depth: 0,
            samples: ImageSet::default(),
            score_samples: ImageSet::default(),
            self_consistency: None,
            sibling_cross_consistency: None,
            status: NodeStatus::Root,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Root or active leaf that has not been split yet.
    pub fn is_splittable(&self) -> bool {
        self.is_leaf() && matches!(self.status, NodeStatus::Root | NodeStatus::Active)
    }
}

/// Outcome of one split attempt as recorded in the build log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitDecision {
    SplitOk,
    LeafIncoherent,
    LeafNotDistinct,
    /// Every candidate seed produced two incoherent children; nothing attached.
    RolledBack,
}

impl From<StopDecision> for SplitDecision {
    fn from(d: StopDecision) -> Self {
        match d {
            StopDecision::SplitOk => SplitDecision::SplitOk,
            StopDecision::LeafIncoherent => SplitDecision::LeafIncoherent,
            StopDecision::LeafNotDistinct => SplitDecision::LeafNotDistinct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub seed: u64,
    pub report: Option<ConsistencyReport>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub parent_id: u32,
    pub candidates: Vec<CandidateSummary>,
    pub chosen_seed: Option<u64>,
    pub final_report: Option<ConsistencyReport>,
    pub decision: SplitDecision,
    pub children: Vec<u32>,
    pub wall_time_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTree {
    pub tree_id: String,
    pub root_images: ImageSet,
    pub nodes: BTreeMap<u32, ConceptNode>,
    pub dictionary: TokenDictionary,
    pub config: BuildConfig,
    pub build_log: Vec<SplitRecord>,
    /// Backend the tree was built with (informational).
    pub backend: String,
}

impl ConceptTree {
    pub fn new(
        tree_id: impl Into<String>,
        root_images: ImageSet,
        dictionary: TokenDictionary,
        config: BuildConfig,
        backend: impl Into<String>,
    ) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(ROOT_ID, ConceptNode::root());
        Self {
            tree_id: tree_id.into(),
            root_images,
            nodes,
            dictionary,
            config,
            build_log: Vec::new(),
            backend: backend.into(),
        }
    }

    pub fn root(&self) -> &ConceptNode {
        &self.nodes[&ROOT_ID]
    }

    pub fn node(&self, id: u32) -> Option<&ConceptNode> {
        self.nodes.get(&id)
    }

    pub fn next_node_id(&self) -> u32 {
        self.nodes.keys().next_back().map_or(ROOT_ID, |m| m + 1)
    }

    /// Non-root nodes.
    pub fn learned_nodes(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.values().filter(|n| n.id != ROOT_ID)
    }

    /// Root or active leaf without a rolled-back split attempt.
    pub fn is_splittable(&self, id: u32) -> bool {
        self.nodes.get(&id).is_some_and(ConceptNode::is_splittable)
            && !self.build_log.iter().any(|r| r.parent_id == id && r.decision == SplitDecision::RolledBack)
    }

    /// Leaves that can still be split within the depth limit, in id order
    /// (which is breadth-first order).
    pub fn pending_splits(&self) -> Vec<u32> {
        self.nodes
            .values()
            .filter(|n| n.depth < self.config.max_depth && self.is_splittable(n.id))
            .map(|n| n.id)
            .collect()
    }

    /// Image set the node represents: the user set for the root, samples otherwise.
    pub fn node_images(&self, id: u32) -> Option<&ImageSet> {
        if id == ROOT_ID {
            Some(&self.root_images)
        } else {
            self.nodes.get(&id).map(|n| &n.samples)
        }
    }

    /// Copy with wall-clock timings zeroed, for comparing builds.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.build_log {
            r.wall_time_ms = 0;
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    RootShape,
    Arity,
    ParentLink,
    Unreachable,
    DuplicateToken,
    UnresolvedToken,
    EmbeddingMismatch,
    OrphanToken,
    Depth,
    Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: Option<u32>,
    pub rule: Rule,
    pub message: String,
}

/// Lists every broken tree invariant. Never fails and never mutates.
pub fn validate_tree(tree: &ConceptTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |node: Option<u32>, rule, message: String| out.push(Violation { node, rule, message });

    match tree.nodes.get(&ROOT_ID) {
        None => push(None, Rule::RootShape, "tree has no root node".into()),
        Some(root) => {
            if root.parent.is_some() || root.token.is_some() || root.embedding.is_some() {
                push(Some(ROOT_ID), Rule::RootShape, "root must have no parent, token or embedding".into());
            }
            if root.status != NodeStatus::Root {
                push(Some(ROOT_ID), Rule::Status, format!("root has status {:?}", root.status));
            }
        }
    }

    let mut token_owner: BTreeMap<&str, u32> = BTreeMap::new();
    for (&id, node) in &tree.nodes {
        if node.id != id {
            push(Some(id), Rule::ParentLink, format!("node stored under id {id} claims id {}", node.id));
        }
        if !node.children.is_empty() && node.children.len() != 2 {
            push(Some(id), Rule::Arity, format!("node has {} children, expected 0 or 2", node.children.len()));
        }
        for child in &node.children {
            match tree.nodes.get(child) {
                Some(c) if c.parent == Some(id) => {
                    if c.depth != node.depth + 1 {
                        push(Some(*child), Rule::Depth, format!("depth {} under parent depth {}", c.depth, node.depth));
                    }
                }
                Some(_) => push(Some(*child), Rule::ParentLink, format!("listed as child of {id} but parent differs")),
                None => push(Some(id), Rule::ParentLink, format!("child {child} does not exist")),
            }
        }
        if id == ROOT_ID {
            continue;
        }
        if node.status == NodeStatus::Root {
            push(Some(id), Rule::Status, "non-root node has root status".into());
        }
        match node.parent.and_then(|p| tree.nodes.get(&p)) {
            Some(p) if p.children.contains(&id) => {}
            Some(_) => push(Some(id), Rule::ParentLink, "parent does not list this node".into()),
            None => push(Some(id), Rule::ParentLink, "missing parent".into()),
        }
        match &node.token {
            None => push(Some(id), Rule::UnresolvedToken, "non-root node has no token".into()),
            Some(token) => {
                if let Some(prev) = token_owner.insert(token, id) {
                    push(Some(id), Rule::DuplicateToken, format!("token {token:?} also used by node {prev}"));
                }
                match tree.dictionary.injected().get(token) {
                    None => push(Some(id), Rule::UnresolvedToken, format!("token {token:?} not in dictionary")),
                    Some(v) if node.embedding.as_ref() != Some(v) => {
                        push(Some(id), Rule::EmbeddingMismatch, format!("embedding of {token:?} differs from dictionary"))
                    }
                    Some(_) => {}
                }
            }
        }
    }

    for token in tree.dictionary.injected().keys() {
        if !token_owner.contains_key(token.as_str()) {
            push(None, Rule::OrphanToken, format!("dictionary token {token:?} belongs to no node"));
        }
    }

    // Reachability from the root also rules out cycles, since every non-root
    // node has exactly one parent link checked above.
    let mut seen = BTreeSet::new();
    let mut stack = vec![ROOT_ID];
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        if let Some(n) = tree.nodes.get(&id) {
            stack.extend(n.children.iter().copied());
        }
    }
    for &id in tree.nodes.keys() {
        if !seen.contains(&id) {
            push(Some(id), Rule::Unreachable, "node not reachable from root".into());
        }
    }
    out
}
