//! JSON shapes returned by the service.

use aspectree::tree::{ConceptTree, NodeStatus, SplitRecord};
use aspectree::{BuildConfig, ImageRef, ImageSource};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub tree_id: String,
    pub backend: String,
    pub node_count: usize,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: u32,
    pub token: Option<String>,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub depth: u32,
    pub status: NodeStatus,
    pub self_consistency: Option<f64>,
    pub sibling_cross_consistency: Option<f64>,
    pub sample_count: usize,
    pub splittable: bool,
    pub thumbnail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub tree_id: String,
    pub backend: String,
    pub config: BuildConfig,
    pub nodes: Vec<NodeView>,
    pub build_log: Vec<SplitRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub id: String,
    pub url: String,
    pub source: ImageSource,
    pub seed: Option<u64>,
    pub prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesView {
    pub tree_id: String,
    pub node_id: u32,
    pub samples: Vec<ImageView>,
    pub score_samples: Vec<ImageView>,
}

impl ImageView {
    pub fn new(image: &ImageRef, url: String) -> Self {
        Self { id: image.id.clone(), url, source: image.source, seed: image.seed, prompt: image.prompt.clone() }
    }
}

/// URLs of a set's files as laid out by the archive writer.
pub fn image_urls(prefix: &str, images: &[ImageRef]) -> Vec<ImageView> {
    images
        .iter()
        .enumerate()
        .map(|(n, im)| ImageView::new(im, format!("{prefix}/{n}.{}", im.payload.extension())))
        .collect()
}

pub fn tree_summary(tree: &ConceptTree) -> TreeSummary {
    TreeSummary {
        tree_id: tree.tree_id.clone(),
        backend: tree.backend.clone(),
        node_count: tree.nodes.len(),
        depth: tree.nodes.values().map(|n| n.depth).max().unwrap_or(0),
    }
}

pub fn tree_view(tree: &ConceptTree) -> TreeView {
    let nodes = tree
        .nodes
        .values()
        .map(|n| {
            let set = tree.node_images(n.id).expect("node exists");
            let thumbnail = set
                .images()
                .first()
                .map(|im| format!("/files/{}/images/{}/0.{}", tree.tree_id, n.id, im.payload.extension()));
            NodeView {
                id: n.id,
                token: n.token.clone(),
                parent: n.parent,
                children: n.children.clone(),
                depth: n.depth,
                status: n.status,
                self_consistency: n.self_consistency,
                sibling_cross_consistency: n.sibling_cross_consistency,
                sample_count: set.len(),
                splittable: tree.is_splittable(n.id),
                thumbnail,
            }
        })
        .collect();
    TreeView {
        tree_id: tree.tree_id.clone(),
        backend: tree.backend.clone(),
        config: tree.config.clone(),
        nodes,
        build_log: tree.build_log.clone(),
    }
}

/// Body of `POST /generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub tree_ids: Vec<String>,
    pub tokens: Vec<String>,
    pub template: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub prompt: String,
    pub images: Vec<ImageView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub tree_id: String,
    pub node_id: u32,
    pub decision: aspectree::SplitDecision,
    pub children: Vec<u32>,
}
