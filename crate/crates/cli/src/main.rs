//! `aspectree`: build, inspect, extend and serve concept trees.

mod heatmap;
mod output;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use aspectree::backend::BackendSpec;
use aspectree::dictionary::compose_prompt;
use aspectree::events::BuildEvent;
use aspectree::fixtures::Hierarchy;
use aspectree::scoring::ConsistencyMatrix;
use aspectree::store::{archive_path, load_tree, load_tree_with_base, save_tree, MANIFEST};
use aspectree::{Backend, BuildConfig, BuildError, ConceptTree, ImagePayload, ImageRef, ImageSet, Scorer, TreeBuilder};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aspectree", version, about = "Decompose a visual concept into a tree of learned token embeddings")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// `mock` or `real` (defaults to $BACKEND, then mock).
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Concept-space JSON for the mock backend (defaults to $MOCK_CONCEPT_SPACE).
    #[arg(long, global = true)]
    concept_space: Option<PathBuf>,
    /// Inference worker URL for the real backend (defaults to $BACKEND_URL).
    #[arg(long, global = true)]
    backend_url: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tree from a directory of images.
    Build(BuildArgs),
    /// Split one node of a saved tree.
    Split { tree: PathBuf, node: u32 },
    /// Generate images of one node.
    Sample {
        tree: PathBuf,
        node: u32,
        #[arg(short, long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: samples/<tree-id>/v<node>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images from a template combining tokens of one or more trees.
    Combine {
        /// Comma-separated tree archive paths.
        #[arg(long, value_delimiter = ',', required = true)]
        trees: Vec<PathBuf>,
        /// Comma-separated tokens, in template slot order.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<String>,
        /// Template with one `{...}` slot per token.
        #[arg(long)]
        template: String,
        #[arg(short, long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "combinations")]
        out: PathBuf,
    },
    /// Consistency matrix of a tree's nodes.
    Score {
        tree: PathBuf,
        /// Also render the matrix as a PNG heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Serve a directory of trees over HTTP.
    Serve {
        trees_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Allowed browser origin (default: any).
        #[arg(long)]
        cors_origin: Option<String>,
        /// Serve archives read-only, without a generation backend.
        #[arg(long)]
        no_backend: bool,
    },
    /// Write the hierarchical mock fixture: root images and its concept space.
    MakeFixture {
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
}

#[derive(Args)]
struct BuildArgs {
    images_dir: PathBuf,
    /// Directory that receives the tree archive.
    #[arg(long, default_value = "trees")]
    out: PathBuf,
    /// Tree id (default: the images directory name).
    #[arg(long)]
    tree_id: Option<String>,
    /// JSON build configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_depth: Option<u32>,
    /// Comma-separated candidate seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    candidate_steps: Option<usize>,
    #[arg(long)]
    final_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue an interrupted build found at the output path.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Replace an existing archive.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Build(args) => build(&cli.backend, args, json),
        Command::Split { tree, node } => split(&cli.backend, &tree, node, json),
        Command::Sample { tree, node, n, seed, out } => sample(&cli.backend, &tree, node, n, seed, out, json),
        Command::Combine { trees, tokens, template, n, seed, out } => {
            combine(&cli.backend, &trees, &tokens, &template, n, seed, &out, json)
        }
        Command::Score { tree, heatmap } => score(&cli.backend, &tree, heatmap.as_deref(), json),
        Command::Serve { trees_dir, port, host, cors_origin, no_backend } => {
            serve(&cli.backend, trees_dir, &host, port, cors_origin, no_backend)
        }
        Command::MakeFixture { dir, seed, noise } => make_fixture(&dir, seed, noise, json),
    }
}

fn open_backend(args: &BackendArgs) -> Result<Arc<dyn Backend>> {
    let spec = BackendSpec::from_lookup(|key| match key {
        "BACKEND" => args.backend.clone().or_else(|| std::env::var(key).ok()),
        "MOCK_CONCEPT_SPACE" => {
            args.concept_space.as_ref().map(|p| p.display().to_string()).or_else(|| std::env::var(key).ok())
        }
        "BACKEND_URL" => args.backend_url.clone().or_else(|| std::env::var(key).ok()),
        _ => std::env::var(key).ok(),
    })?;
    spec.open().context("opening backend")
}

/// Images in a directory (`.vec` or `.png`), in file-name order.
fn read_images(dir: &Path) -> Result<ImageSet> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        let Some(ext) = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) else { continue };
        if ext != "vec" && ext != "png" {
            continue;
        }
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let payload = ImagePayload::from_file_bytes(&ext, bytes)
            .with_context(|| format!("{} is not a valid .{ext} image", path.display()))?;
        images.push(ImageRef::user(payload));
    }
    if images.is_empty() {
        bail!("no .vec or .png images in {}", dir.display());
    }
    Ok(ImageSet::new(images))
}

fn write_images(dir: &Path, set: &ImageSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::with_capacity(set.len());
    for (n, im) in set.images().iter().enumerate() {
        let path = dir.join(format!("{n:03}.{}", im.payload.extension()));
        fs::write(&path, im.payload.to_file_bytes()).with_context(|| format!("writing {}", path.display()))?;
        out.push(path);
    }
    Ok(out)
}

fn progress_printer(json: bool) -> aspectree::EventSink {
    Arc::new(move |e: &BuildEvent| {
        if json {
            return;
        }
        match e {
            BuildEvent::SplitStarted { node_id } => eprintln!("splitting v{node_id}"),
            BuildEvent::CandidateScored { seed, report, .. } => eprintln!(
                "  seed {seed:>5}: self {:.3} / {:.3}, cross {:.3}, objective {:.3}",
                report.self_left, report.self_right, report.cross, report.objective
            ),
            BuildEvent::CandidateFailed { seed, reason, .. } => eprintln!("  seed {seed:>5}: failed ({reason})"),
            BuildEvent::SeedChosen { seed, .. } => eprintln!("  chose seed {seed}, finishing"),
            BuildEvent::SplitFinished { node_id, decision, children } => {
                eprintln!("  v{node_id}: {} {:?}", output::decision_name(*decision), children)
            }
            BuildEvent::TrainProgress { .. } => {}
        }
    })
}

fn build_config(args: &BuildArgs) -> Result<BuildConfig> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => BuildConfig::default(),
    };
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.max_depth {
        config.max_depth = v;
    }
    if let Some(v) = &args.seeds {
        config.k_seeds = v.clone();
    }
    if let Some(v) = args.candidate_steps {
        config.candidate_steps = v;
    }
    if let Some(v) = args.final_steps {
        config.final_steps = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    config.validate()?;
    Ok(config)
}

fn build(backend: &BackendArgs, args: BuildArgs, json: bool) -> Result<()> {
    let config = build_config(&args)?;
    let tree_id = match &args.tree_id {
        Some(id) => id.clone(),
        None => args
            .images_dir
            .canonicalize()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .context("cannot derive a tree id from the images directory; pass --tree-id")?,
    };
    let archive = archive_path(&args.out, &tree_id);
    let builder = TreeBuilder::new(open_backend(backend)?).with_events(progress_printer(json));
    let mut checkpoint = |t: &ConceptTree| save_tree(t, &archive).map(|_| ()).map_err(|e| BuildError::Checkpoint(e.to_string()));
    let exists = archive.join(MANIFEST).exists();
    let tree = if args.resume {
        if !exists {
            bail!("nothing to resume at {}", archive.display());
        }
        builder.resume_archive(&archive, &mut checkpoint)?
    } else {
        if exists && !args.force {
            bail!("{} already exists; pass --resume to continue it or --force to replace it", archive.display());
        }
        let tree = builder.new_tree(&tree_id, read_images(&args.images_dir)?, config)?;
        checkpoint(&tree)?;
        builder.run(tree, &mut checkpoint).with_context(|| format!("build stopped; partial tree saved at {}", archive.display()))?
    };
    save_tree(&tree, &archive)?;
    output::print_tree(&tree, &archive, json);
    Ok(())
}

fn load_live(backend: &Arc<dyn Backend>, tree: &Path) -> Result<ConceptTree> {
    load_tree_with_base(tree, backend.base_vocabulary()).with_context(|| format!("loading {}", tree.display()))
}

fn split(backend: &BackendArgs, path: &Path, node: u32, json: bool) -> Result<()> {
    let backend = open_backend(backend)?;
    let tree = load_live(&backend, path)?;
    let builder = TreeBuilder::new(backend).with_events(progress_printer(json));
    let (next, record) = builder.split_node(&tree, node)?;
    save_tree(&next, path)?;
    if json {
        output::print_json(&json!({ "archive": path, "record": record }));
    } else {
        println!("v{node}: {} -> {:?}", output::decision_name(record.decision), record.children);
    }
    Ok(())
}

fn sample(
    backend: &BackendArgs,
    path: &Path,
    node: u32,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
    json: bool,
) -> Result<()> {
    let backend = open_backend(backend)?;
    let tree = load_live(&backend, path)?;
    let token = tree
        .node(node)
        .with_context(|| format!("tree {} has no node {node}", tree.tree_id))?
        .token
        .clone()
        .context("the root has no token; sample a learned node")?;
    let prompt = compose_prompt(&tree.dictionary, &tree.config.node_template, &[&token])?;
    let images = backend.generate(&prompt, &tree.dictionary, seed, n)?;
    let out = out.unwrap_or_else(|| PathBuf::from("samples").join(&tree.tree_id).join(format!("v{node}-s{seed}")));
    let files = write_images(&out, &images)?;
    output::print_generated(&prompt, &files, json);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn combine(
    backend: &BackendArgs,
    trees: &[PathBuf],
    tokens: &[String],
    template: &str,
    n: usize,
    seed: u64,
    out: &Path,
    json: bool,
) -> Result<()> {
    let backend = open_backend(backend)?;
    let mut dict: Option<aspectree::dictionary::TokenDictionary> = None;
    for path in trees {
        let tree = load_live(&backend, path)?;
        dict = Some(match dict {
            None => tree.dictionary,
            Some(d) => d.merge(&tree.dictionary)?,
        });
    }
    let dict = dict.context("no trees given")?;
    let prompt = compose_prompt(&dict, template, tokens)?;
    let images = backend.generate(&prompt, &dict, seed, n)?;
    let files = write_images(out, &images)?;
    output::print_generated(&prompt, &files, json);
    Ok(())
}

fn score(backend: &BackendArgs, path: &Path, heatmap_path: Option<&Path>, json: bool) -> Result<()> {
    let tree = load_tree(path).with_context(|| format!("loading {}", path.display()))?;
    let nodes: Vec<_> = tree.learned_nodes().collect();
    if nodes.len() < 2 {
        bail!("tree {} has no learned nodes to score", tree.tree_id);
    }
    let labels: Vec<String> = nodes.iter().map(|n| format!("v{}", n.id)).collect();
    let cached: Option<Vec<_>> = nodes.iter().map(|n| n.score_samples.cached_embeddings()).collect();
    let matrix = match cached {
        Some(rows) => ConsistencyMatrix::from_rows(labels, &rows)?,
        None => {
            let backend = open_backend(backend)?;
            let sets: Vec<(String, &ImageSet)> = labels.into_iter().zip(nodes.iter().map(|n| &n.score_samples)).collect();
            Scorer::new(backend.as_ref()).consistency_matrix(&sets)?
        }
    };
    if let Some(p) = heatmap_path {
        heatmap::render(&matrix, p)?;
    }
    if json {
        output::print_json(&json!({ "tree_id": tree.tree_id, "matrix": matrix, "heatmap": heatmap_path }));
    } else {
        output::print_matrix(&matrix);
    }
    Ok(())
}

fn serve(
    backend: &BackendArgs,
    trees_dir: PathBuf,
    host: &str,
    port: u16,
    cors_origin: Option<String>,
    no_backend: bool,
) -> Result<()> {
    if !trees_dir.is_dir() {
        bail!("{} is not a directory", trees_dir.display());
    }
    let backend = if no_backend { None } else { Some(open_backend(backend)?) };
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
    let mut config = aspectree_service::ServiceConfig::new(trees_dir, backend);
    config.cors_origin = cors_origin;
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    runtime.block_on(aspectree_service::serve(config, addr))?;
    Ok(())
}

fn make_fixture(dir: &Path, seed: u64, noise: f64, json: bool) -> Result<()> {
    let h = Hierarchy::new();
    let files = write_images(dir, &h.root_images(seed, noise))?;
    let space = dir.join("concept-space.json");
    fs::write(&space, serde_json::to_string_pretty(&h.space())?)?;
    if json {
        output::print_json(&json!({ "images": files, "concept_space": space }));
    } else {
        println!("wrote {} images and {} to {}", files.len(), space.display(), dir.display());
    }
    Ok(())
}
