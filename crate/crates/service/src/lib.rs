//! HTTP service exposing concept-tree archives, node galleries, split jobs and
//! prompt-combination generation.
//!
//! Trees are read from a directory of archives. Splits and generation run as
//! background jobs; a split rewrites its archive atomically only when it
//! completes, so a failed job leaves the archive as it was.

mod error;
pub mod jobs;
pub mod views;

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use aspectree::dictionary::{template_slots, DictionaryError};
use aspectree::events::EventSink;
use aspectree::store::{archive_path, list_archives, load_tree, load_tree_with_base, save_tree, StoreError};
use aspectree::tree::ConceptTree;
use aspectree::{compose_prompt, Backend, TokenDictionary, TreeBuilder};
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use jobs::{JobEvent, JobHandle, JobKind, JobRegistry, JobState};
pub use views::{GenerateRequest, GenerateResult, NodeView, SamplesView, SplitResult, TreeSummary, TreeView};

/// Largest image count accepted by one generation job.
pub const MAX_GENERATE: usize = 64;
/// Directory under the trees directory that holds generation results.
pub const GENERATED_DIR: &str = "_generated";

#[derive(Clone)]
pub struct ServiceConfig {
    pub trees_dir: PathBuf,
    pub backend: Option<Arc<dyn Backend>>,
    /// Allowed browser origin; `None` allows any origin.
    pub cors_origin: Option<String>,
    pub generate_workers: usize,
}

impl ServiceConfig {
    pub fn new(trees_dir: impl Into<PathBuf>, backend: Option<Arc<dyn Backend>>) -> Self {
        Self { trees_dir: trees_dir.into(), backend, cors_origin: None, generate_workers: 2 }
    }
}

struct AppState {
    trees_dir: PathBuf,
    backend: Option<Arc<dyn Backend>>,
    jobs: JobRegistry,
    busy: Mutex<BTreeSet<String>>,
    generate_slots: Semaphore,
}

type Shared = Arc<AppState>;

/// Releases a tree's split lock when the job ends, however it ends.
struct TreeLock {
    state: Shared,
    tree_id: String,
}

impl Drop for TreeLock {
    fn drop(&mut self) {
        self.state.busy.lock().expect("busy set poisoned").remove(&self.tree_id);
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && !id.starts_with('_') && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn store_error(tree_id: &str, e: StoreError) -> ApiError {
    match e {
        StoreError::MissingFile(ref p) if p.ends_with("manifest.json") => ApiError::not_found(format!("unknown tree {tree_id:?}")),
        other => ApiError::internal(format!("loading tree {tree_id:?}: {other}")),
    }
}

impl AppState {
    fn tree_dir(&self, tree_id: &str) -> Result<PathBuf, ApiError> {
        if !valid_id(tree_id) {
            return Err(ApiError::not_found(format!("unknown tree {tree_id:?}")));
        }
        Ok(archive_path(&self.trees_dir, tree_id))
    }

    fn load(&self, tree_id: &str) -> Result<ConceptTree, ApiError> {
        let dir = self.tree_dir(tree_id)?;
        load_tree(&dir).map_err(|e| store_error(tree_id, e))
    }

    fn backend(&self) -> Result<Arc<dyn Backend>, ApiError> {
        self.backend.clone().ok_or_else(ApiError::no_backend)
    }
}

pub fn router(config: ServiceConfig) -> Router {
    let cors = match &config.cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods(tower_http::cors::Any)
    .allow_headers(tower_http::cors::Any);
    let state = Arc::new(AppState {
        trees_dir: config.trees_dir.clone(),
        backend: config.backend,
        jobs: JobRegistry::default(),
        busy: Mutex::new(BTreeSet::new()),
        generate_slots: Semaphore::new(config.generate_workers.max(1)),
    });
    Router::new()
        .route("/trees", get(list_trees))
        .route("/trees/{id}", get(get_tree))
        .route("/trees/{id}/nodes/{node}/samples", get(get_samples))
        .route("/trees/{id}/nodes/{node}/split", post(split))
        .route("/generate", post(generate))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .nest_service("/files", ServeDir::new(&config.trees_dir))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(address = %listener.local_addr()?, trees = %config.trees_dir.display(), "serving");
    axum::serve(listener, router(config)).await
}

async fn list_trees(State(state): State<Shared>) -> Result<Json<Vec<TreeSummary>>, ApiError> {
    let dir = state.trees_dir.clone();
    let ids = list_archives(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut out = Vec::new();
    for id in ids {
        match load_tree(&archive_path(&dir, &id)) {
            Ok(tree) => out.push(views::tree_summary(&tree)),
            Err(e) => tracing::warn!(tree = %id, error = %e, "skipping unreadable archive"),
        }
    }
    Ok(Json(out))
}

async fn get_tree(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<TreeView>, ApiError> {
    Ok(Json(views::tree_view(&state.load(&id)?)))
}

async fn get_samples(
    State(state): State<Shared>,
    UrlPath((id, node)): UrlPath<(String, u32)>,
) -> Result<Json<SamplesView>, ApiError> {
    let tree = state.load(&id)?;
    let n = tree.node(node).ok_or_else(|| ApiError::not_found(format!("tree {id:?} has no node {node}")))?;
    let set = tree.node_images(node).expect("node exists");
    let prefix = format!("/files/{id}/images/{node}");
    Ok(Json(SamplesView {
        tree_id: id.clone(),
        node_id: node,
        samples: views::image_urls(&prefix, set.images()),
        score_samples: views::image_urls(&format!("{prefix}/scoring"), n.score_samples.images()),
    }))
}

async fn split(
    State(state): State<Shared>,
    UrlPath((id, node)): UrlPath<(String, u32)>,
) -> Result<impl IntoResponse, ApiError> {
    let tree = state.load(&id)?;
    let n = tree.node(node).ok_or_else(|| ApiError::not_found(format!("tree {id:?} has no node {node}")))?;
    if !tree.is_splittable(node) {
        let why = if n.is_leaf() { format!("status {:?}", n.status) } else { "already split".to_owned() };
        return Err(ApiError::conflict(format!("node {node} of {id:?} cannot be split ({why})")));
    }
    let backend = state.backend()?;
    if !state.busy.lock().expect("busy set poisoned").insert(id.clone()) {
        return Err(ApiError::conflict(format!("tree {id:?} already has a split in progress")));
    }
    let lock = TreeLock { state: Arc::clone(&state), tree_id: id.clone() };
    let handle = state.jobs.create(JobKind::Split, vec![id.clone()]);
    let job_id = handle.id.clone();
    let st = Arc::clone(&state);
    tokio::spawn(async move {
        let _lock = lock;
        st.jobs.set_running(&job_id);
        let jobs = st.jobs.clone();
        let jid = job_id.clone();
        let dir = archive_path(&st.trees_dir, &id);
        let tree_id = id.clone();
        let work = tokio::task::spawn_blocking(move || run_split(backend, &dir, &tree_id, node, jobs, jid)).await;
        let outcome = match work {
            Ok(r) => r,
            Err(e) => Err(format!("split job crashed: {e}")),
        };
        if let Err(ref e) = outcome {
            tracing::warn!(job = %job_id, error = %e, "split failed");
        }
        st.jobs.finish(&job_id, outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(handle)))
}

fn run_split(
    backend: Arc<dyn Backend>,
    dir: &Path,
    tree_id: &str,
    node: u32,
    jobs: JobRegistry,
    job_id: String,
) -> Result<serde_json::Value, String> {
    let tree = load_tree_with_base(dir, backend.base_vocabulary()).map_err(|e| e.to_string())?;
    let sink: EventSink = {
        let jobs = jobs.clone();
        Arc::new(move |e| jobs.record(&job_id, e))
    };
    let builder = TreeBuilder::new(backend).with_events(sink);
    let (next, record) = builder.split_node(&tree, node).map_err(|e| e.to_string())?;
    save_tree(&next, dir).map_err(|e| e.to_string())?;
    let result = SplitResult { tree_id: tree_id.to_owned(), node_id: node, decision: record.decision, children: record.children };
    serde_json::to_value(result).map_err(|e| e.to_string())
}

fn dictionary_error(e: DictionaryError) -> ApiError {
    ApiError::unprocessable(e.to_string())
}

async fn generate(State(state): State<Shared>, Json(req): Json<GenerateRequest>) -> Result<impl IntoResponse, ApiError> {
    if req.n == 0 || req.n > MAX_GENERATE {
        return Err(ApiError::unprocessable(format!("n must be between 1 and {MAX_GENERATE}, got {}", req.n)));
    }
    if req.tree_ids.is_empty() {
        return Err(ApiError::unprocessable("tree_ids must not be empty"));
    }
    let slots = template_slots(&req.template);
    if slots != req.tokens.len() {
        return Err(dictionary_error(DictionaryError::ArityMismatch { slots, tokens: req.tokens.len() }));
    }
    let mut dict: Option<TokenDictionary> = None;
    for id in &req.tree_ids {
        let tree = state.load(id)?;
        dict = Some(match dict {
            None => tree.dictionary,
            Some(d) => d.merge(&tree.dictionary).map_err(dictionary_error)?,
        });
    }
    let backend = state.backend()?;
    let dict = dict.expect("at least one tree").attach_base(backend.base_vocabulary()).map_err(dictionary_error)?;
    let prompt = compose_prompt(&dict, &req.template, &req.tokens).map_err(dictionary_error)?;

    let handle = state.jobs.create(JobKind::Generate, req.tree_ids.clone());
    let job_id = handle.id.clone();
    let st = Arc::clone(&state);
    tokio::spawn(async move {
        let _permit = st.generate_slots.acquire().await.expect("semaphore open");
        st.jobs.set_running(&job_id);
        let out_dir = st.trees_dir.join(GENERATED_DIR).join(&job_id);
        let url_prefix = format!("/files/{GENERATED_DIR}/{job_id}");
        let work = tokio::task::spawn_blocking(move || {
            let images = backend.generate(&prompt, &dict, req.seed, req.n).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
            for (n, im) in images.images().iter().enumerate() {
                let path = out_dir.join(format!("{n}.{}", im.payload.extension()));
                std::fs::write(&path, im.payload.to_file_bytes()).map_err(|e| e.to_string())?;
            }
            let result = GenerateResult { prompt, images: views::image_urls(&url_prefix, images.images()) };
            serde_json::to_value(result).map_err(|e| e.to_string())
        })
        .await;
        let outcome = work.unwrap_or_else(|e| Err(format!("generation job crashed: {e}")));
        st.jobs.finish(&job_id, outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(handle)))
}

async fn get_job(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<JobHandle>, ApiError> {
    state.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {id:?}")))
}

/// Server-sent events: the job's full history, then live events until the
/// job reaches a terminal state.
async fn job_events(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if state.jobs.get(&id).is_none() {
        return Err(ApiError::not_found(format!("unknown job {id:?}")));
    }
    let jobs = state.jobs.clone();
    let s = stream::unfold((0usize, false), move |(next, done)| {
        let jobs = jobs.clone();
        let id = id.clone();
        async move {
            if done {
                return None;
            }
            loop {
                let (events, terminal, mut rx) = jobs.events_since(&id, next)?;
                if !events.is_empty() {
                    let batch: Vec<Result<Event, Infallible>> = events
                        .iter()
                        .map(|e| Ok(Event::default().event(event_name(e)).json_data(e).expect("serializable event")))
                        .collect();
                    // A terminal state event is always the last one recorded.
                    let finished = terminal;
                    return Some((stream::iter(batch), (next + events.len(), finished)));
                }
                if terminal {
                    return None;
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        }
    });
    use futures::StreamExt;
    Ok(Sse::new(s.flatten()).keep_alive(KeepAlive::default()))
}

fn event_name(e: &JobEvent) -> &'static str {
    match e {
        JobEvent::State { .. } => "state",
        JobEvent::Progress { .. } => "progress",
        JobEvent::Build { .. } => "build",
    }
}
