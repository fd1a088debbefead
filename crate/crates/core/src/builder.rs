//! Breadth-first construction of a concept tree.
//!
//! One split: take the parent's training set, inject two sibling tokens,
//! train one candidate pair per seed, score each pair on freshly generated
//! samples, keep the best, continue training it, then attach the two children
//! with their samples, scores and stop status.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::{BuildConfig, ConfigError};
use crate::dictionary::{compose_prompt, is_valid_placeholder, placeholder_name, DictionaryError, TokenDictionary};
use crate::events::{discard, BuildEvent, EventSink, TrainPhase};
use crate::image::ImageSet;
use crate::report::{ConsistencyReport, StopDecision};
use crate::store::{load_tree_with_base, StoreError};
use crate::scoring::{best_index, evaluate_stop, ConsistencyError, Scorer};
use crate::trainer::{TrainError, TrainJob};
use crate::tree::{
    validate_tree, CandidateSummary, ConceptNode, ConceptTree, NodeStatus, SplitDecision, SplitRecord, ROOT_ID,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("root image set is empty")]
    NoRootImages,
    #[error("tree id {0:?} may only contain ASCII letters, digits, '_' and '-'")]
    InvalidTreeId(String),
    #[error("node {0} does not exist")]
    UnknownNode(u32),
    #[error("node {node} cannot be split ({reason})")]
    NotSplittable { node: u32, reason: String },
    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),
    #[error("training seed {seed}: {source}")]
    Train { seed: u64, source: TrainError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error("corrupt build log: {0}")]
    CorruptLog(String),
    #[error("checkpoint failed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for BuildError {
    /// Damaged archive content is a corrupt log; I/O and version problems are not.
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::MissingFile(_)
            | StoreError::Checksum(_)
            | StoreError::Manifest(_)
            | StoreError::Codec { .. }
            | StoreError::Invalid(_) => BuildError::CorruptLog(e.to_string()),
            other => BuildError::Store(other),
        }
    }
}

/// Deterministic sub-seed for one purpose within a split.
fn derive_seed(purpose: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(purpose.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

struct Candidate {
    job: TrainJob,
    report: ConsistencyReport,
}

pub type Checkpoint<'a> = &'a mut dyn FnMut(&ConceptTree) -> Result<(), BuildError>;

pub struct TreeBuilder {
    backend: Arc<dyn Backend>,
    events: EventSink,
    parallel: bool,
    progress_every: usize,
}

impl TreeBuilder {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend, events: discard(), parallel: true, progress_every: 10 }
    }

    pub fn with_events(mut self, events: EventSink) -> Self {
        self.events = events;
        self
    }

    /// Train candidates one after another instead of on separate threads.
    /// Results are identical either way.
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    /// Emit a training-progress event every `n` steps (and on the last step).
    pub fn progress_every(mut self, n: usize) -> Self {
        self.progress_every = n.max(1);
        self
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    fn emit(&self, e: BuildEvent) {
        (self.events)(&e);
    }

    /// Root-only tree over the backend's vocabulary.
    pub fn new_tree(&self, tree_id: &str, root_images: ImageSet, config: BuildConfig) -> Result<ConceptTree, BuildError> {
        config.validate()?;
        if root_images.is_empty() {
            return Err(BuildError::NoRootImages);
        }
        if tree_id.is_empty() || !is_valid_placeholder(&placeholder_name(tree_id, 0)) {
            return Err(BuildError::InvalidTreeId(tree_id.to_owned()));
        }
        let dict = TokenDictionary::new(self.backend.base_vocabulary());
        Ok(ConceptTree::new(tree_id, root_images, dict, config, self.backend.name()))
    }

    pub fn build_tree(&self, tree_id: &str, root_images: ImageSet, config: BuildConfig) -> Result<ConceptTree, BuildError> {
        let tree = self.new_tree(tree_id, root_images, config)?;
        self.run(tree, &mut |_| Ok(()))
    }

    /// Splits pending nodes breadth-first until none remain, calling
    /// `checkpoint` after every split so a partial tree can be persisted.
    pub fn run(&self, mut tree: ConceptTree, checkpoint: Checkpoint<'_>) -> Result<ConceptTree, BuildError> {
        tree.config.validate()?;
        while let Some(&node) = tree.pending_splits().first() {
            let (next, _) = self.split_node(&tree, node)?;
            tree = next;
            checkpoint(&tree)?;
        }
        Ok(tree)
    }

    /// Continues an interrupted build. Completed splits are never redone.
    pub fn resume_build(&self, tree: ConceptTree, checkpoint: Checkpoint<'_>) -> Result<ConceptTree, BuildError> {
        check_log(&tree)?;
        let dictionary = tree.dictionary.attach_base(self.backend.base_vocabulary())?;
        self.run(ConceptTree { dictionary, ..tree }, checkpoint)
    }

    /// Loads a saved partial tree and resumes it.
    pub fn resume_archive(&self, dir: &Path, checkpoint: Checkpoint<'_>) -> Result<ConceptTree, BuildError> {
        let tree = load_tree_with_base(dir, self.backend.base_vocabulary())?;
        self.resume_build(tree, checkpoint)
    }

    fn training_set(&self, tree: &ConceptTree, node: &ConceptNode) -> Result<ImageSet, BuildError> {
        if node.id == ROOT_ID {
            return Ok(tree.root_images.clone());
        }
        if node.samples.len() >= 2 {
            return Ok(node.samples.clone());
        }
        let token = node.token.as_deref().ok_or_else(|| BuildError::CorruptLog(format!("node {} has no token", node.id)))?;
        let prompt = compose_prompt(&tree.dictionary, &tree.config.node_template, &[token])?;
        let pool = self.backend.generate(
            &prompt,
            &tree.dictionary,
            derive_seed("parent-pool", &[node.id as u64]),
            tree.config.score_set_size,
        )?;
        Ok(Scorer::new(self.backend.as_ref()).curate_training_set(&pool, tree.config.train_set_size)?)
    }

    fn sample_pair(
        &self,
        dict: &TokenDictionary,
        config: &BuildConfig,
        tokens: [&str; 2],
        seeds: [u64; 2],
    ) -> Result<[ImageSet; 2], BuildError> {
        let mut out = Vec::with_capacity(2);
        for (token, seed) in tokens.into_iter().zip(seeds) {
            let prompt = compose_prompt(dict, &config.node_template, &[token])?;
            out.push(self.backend.generate(&prompt, dict, seed, config.score_set_size)?);
        }
        let right = out.pop().expect("two sets");
        Ok([out.pop().expect("two sets"), right])
    }

    fn run_candidate(
        &self,
        node_id: u32,
        seed: u64,
        mut job: TrainJob,
        config: &BuildConfig,
    ) -> Result<Result<Candidate, String>, BuildError> {
        let mut progress = |step: usize, loss: f64| {
            if step.is_multiple_of(self.progress_every) || step == config.candidate_steps {
                self.emit(BuildEvent::TrainProgress { node_id, seed, phase: TrainPhase::Candidate, step, loss });
            }
        };
        match job.train_pair_with(self.backend.as_ref(), config.candidate_steps, &mut progress) {
            Ok(_) => {}
            Err(e @ TrainError::NonFinite { .. }) => return Ok(Err(e.to_string())),
            Err(source) => return Err(BuildError::Train { seed, source }),
        }
        let (l, r) = job.tokens();
        let [left, right] = self.sample_pair(
            job.dictionary(),
            config,
            [l, r],
            [derive_seed("candidate-left", &[node_id as u64, seed]), derive_seed("candidate-right", &[node_id as u64, seed])],
        )?;
        let report = Scorer::new(self.backend.as_ref()).score_candidate(&left, &right)?;
        Ok(Ok(Candidate { job, report }))
    }

    /// Splits one node and returns the new tree with its split record. The
    /// input tree is left untouched, so a failure never leaves half a split.
    pub fn split_node(&self, tree: &ConceptTree, node_id: u32) -> Result<(ConceptTree, SplitRecord), BuildError> {
        let started = Instant::now();
        let config = &tree.config;
        config.validate()?;
        let node = tree.node(node_id).ok_or(BuildError::UnknownNode(node_id))?;
        if !node.is_leaf() {
            return Err(BuildError::NotSplittable { node: node_id, reason: "already split".into() });
        }
        if !tree.is_splittable(node_id) {
            return Err(BuildError::NotSplittable { node: node_id, reason: format!("status {:?}", node.status) });
        }
        self.emit(BuildEvent::SplitStarted { node_id });

        let parent_images = self.training_set(tree, node)?;
        let left_id = tree.next_node_id();
        let right_id = left_id + 1;
        let left = placeholder_name(&tree.tree_id, left_id);
        let right = placeholder_name(&tree.tree_id, right_id);
        let dict = tree.dictionary.extend(&[&left, &right], &config.init_word)?;
        let template_job =
            TrainJob::new(self.backend.as_ref(), parent_images, &left, &right, dict, config.clone(), 0)
            .map_err(|source| BuildError::Train { seed: 0, source })?;

        let run_one = |seed: u64| {
            let job = template_job.clone().with_seed(derive_seed("train", &[node_id as u64, seed]));
            self.run_candidate(node_id, seed, job, config)
        };
        let outcomes: Vec<Result<Result<Candidate, String>, BuildError>> = if self.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = config.k_seeds.iter().map(|&seed| s.spawn(move || run_one(seed))).collect();
                handles.into_iter().map(|h| h.join().expect("candidate thread panicked")).collect()
            })
        } else {
            config.k_seeds.iter().map(|&seed| run_one(seed)).collect()
        };

        let mut candidates = Vec::new();
        let mut summaries = Vec::new();
        for (&seed, outcome) in config.k_seeds.iter().zip(outcomes) {
            match outcome? {
                Ok(c) => {
                    self.emit(BuildEvent::CandidateScored { node_id, seed, report: c.report });
                    summaries.push(CandidateSummary { seed, report: Some(c.report), failure: None });
                    candidates.push((seed, c));
                }
                Err(reason) => {
                    self.emit(BuildEvent::CandidateFailed { node_id, seed, reason: reason.clone() });
                    summaries.push(CandidateSummary { seed, report: None, failure: Some(reason) });
                }
            }
        }
        if candidates.is_empty() {
            let reasons: Vec<String> = summaries.iter().filter_map(|s| s.failure.clone()).collect();
            return Err(BuildError::AllCandidatesFailed(reasons.join("; ")));
        }

        let threshold = config.self_coherency_threshold;
        let all_incoherent =
            candidates.iter().all(|(_, c)| c.report.self_left < threshold && c.report.self_right < threshold);
        if all_incoherent {
            let mut next = tree.clone();
            if node_id != ROOT_ID {
                next.nodes.get_mut(&node_id).expect("exists").status = NodeStatus::LeafStopped;
            }
            let record = SplitRecord {
                parent_id: node_id,
                candidates: summaries,
                chosen_seed: None,
                final_report: None,
                decision: SplitDecision::RolledBack,
                children: Vec::new(),
                wall_time_ms: started.elapsed().as_millis() as u64,
            };
            next.build_log.push(record.clone());
            self.emit(BuildEvent::SplitFinished { node_id, decision: SplitDecision::RolledBack, children: Vec::new() });
            return Ok((next, record));
        }

        let keys: Vec<(u64, ConsistencyReport)> = candidates.iter().map(|(s, c)| (*s, c.report)).collect();
        let best = best_index(&keys).expect("non-empty");
        let (chosen_seed, winner) = candidates.swap_remove(best);
        drop(candidates);
        self.emit(BuildEvent::SeedChosen { node_id, seed: chosen_seed, objective: winner.report.objective });

        let mut job = winner.job;
        let mut progress = |step: usize, loss: f64| {
            if step.is_multiple_of(self.progress_every) || step == config.step_budget() {
                self.emit(BuildEvent::TrainProgress { node_id, seed: chosen_seed, phase: TrainPhase::Final, step, loss });
            }
        };
        job.train_pair_with(self.backend.as_ref(), config.final_steps, &mut progress)
            .map_err(|source| BuildError::Train { seed: chosen_seed, source })?;

        let scorer = Scorer::new(self.backend.as_ref());
        let [left_all, right_all] = self.sample_pair(
            job.dictionary(),
            config,
            [&left, &right],
            [derive_seed("node-samples", &[left_id as u64]), derive_seed("node-samples", &[right_id as u64])],
        )?;
        let report = scorer.score_candidate(&left_all, &right_all)?;
        let left_curated = scorer.curate_training_set(&left_all, config.train_set_size)?;
        let right_curated = scorer.curate_training_set(&right_all, config.train_set_size)?;
        let decision = evaluate_stop(&report, config);
        let status = |own: f64| match decision {
            StopDecision::SplitOk => NodeStatus::Active,
            StopDecision::LeafNotDistinct => NodeStatus::LeafStopped,
            StopDecision::LeafIncoherent if own < threshold => NodeStatus::LeafIncoherent,
            StopDecision::LeafIncoherent => NodeStatus::LeafStopped,
        };

        let dictionary = job.into_dictionary();
        let depth = node.depth + 1;
        let child = |id: u32, token: &str, samples: ImageSet, score_samples: ImageSet, own: f64| ConceptNode {
            id,
            token: Some(token.to_owned()),
            embedding: Some(dictionary.injected()[token].clone()),
            parent: Some(node_id),
            children: Vec::new(),
            depth,
            samples,
            score_samples,
            self_consistency: Some(own),
            sibling_cross_consistency: Some(report.cross),
            status: status(own),
        };
        let left_node = child(left_id, &left, left_curated, left_all, report.self_left);
        let right_node = child(right_id, &right, right_curated, right_all, report.self_right);

        let mut next = tree.clone();
        next.nodes.get_mut(&node_id).expect("exists").children = vec![left_id, right_id];
        next.nodes.insert(left_id, left_node);
        next.nodes.insert(right_id, right_node);
        next.dictionary = dictionary;
        let record = SplitRecord {
            parent_id: node_id,
            candidates: summaries,
            chosen_seed: Some(chosen_seed),
            final_report: Some(report),
            decision: decision.into(),
            children: vec![left_id, right_id],
            wall_time_ms: started.elapsed().as_millis() as u64,
        };
        next.build_log.push(record.clone());
        self.emit(BuildEvent::SplitFinished { node_id, decision: record.decision, children: record.children.clone() });
        Ok((next, record))
    }
}

/// Consistency between a tree's structure and its build log.
pub fn check_log(tree: &ConceptTree) -> Result<(), BuildError> {
    let corrupt = |m: String| Err(BuildError::CorruptLog(m));
    if tree.root_images.is_empty() {
        return corrupt("root image set is empty".into());
    }
    if let Some(v) = validate_tree(tree).into_iter().next() {
        return corrupt(format!("{} (node {:?})", v.message, v.node));
    }
    for node in tree.nodes.values().filter(|n| !n.is_leaf()) {
        let records: Vec<&SplitRecord> = tree
            .build_log
            .iter()
            .filter(|r| r.parent_id == node.id && r.decision != SplitDecision::RolledBack)
            .collect();
        match records.as_slice() {
            [r] if r.children == node.children => {}
            [_] => return corrupt(format!("log children of node {} differ from the tree", node.id)),
            [] => return corrupt(format!("node {} was split but has no log entry", node.id)),
            _ => return corrupt(format!("node {} has several split entries", node.id)),
        }
    }
    for r in &tree.build_log {
        match tree.node(r.parent_id) {
            None => return corrupt(format!("log refers to missing node {}", r.parent_id)),
            Some(n) if r.decision != SplitDecision::RolledBack && n.children != r.children => {
                return corrupt(format!("log entry for node {} does not match its children", r.parent_id))
            }
            Some(_) => {}
        }
        if let (Some(seed), SplitDecision::SplitOk | SplitDecision::LeafIncoherent | SplitDecision::LeafNotDistinct) =
            (r.chosen_seed, r.decision)
        {
            if !tree.config.k_seeds.contains(&seed) {
                return corrupt(format!("chosen seed {seed} of node {} is not configured", r.parent_id));
            }
        }
    }
    Ok(())
}
