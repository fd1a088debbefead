use std::fs;
use std::sync::Arc;

use aspectree::backend::mock::{ConceptSpace, MockBackend};
use aspectree::fixtures::{planted_clusters, random_unit, Hierarchy};
use aspectree::store::{archive_path, list_archives, load_tree, load_tree_with_base, read_schema_version, save_tree, MANIFEST};
use aspectree::{Backend, BuildConfig, ConceptTree, StoreError, TreeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small tree whose shape, seeds and data vary with `seed`.
fn random_tree(seed: u64) -> (ConceptTree, Arc<dyn Backend>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = ConceptSpace { seed, ..ConceptSpace::default() };
    let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(space).unwrap());
    let clusters: Vec<Vec<f64>> = (0..rng.random_range(1..=3)).map(|_| random_unit(&mut rng, 16)).collect();
    let images = planted_clusters(&clusters, rng.random_range(2..=5), 0.05, seed);
    let config = BuildConfig {
        k_seeds: vec![seed, seed + 1],
        candidate_steps: rng.random_range(100..=200),
        final_steps: rng.random_range(200..=600),
        max_depth: rng.random_range(0..=2),
        ..BuildConfig::default()
    };
    let tree = TreeBuilder::new(backend.clone()).build_tree(&format!("tree-{seed}"), images, config).unwrap();
    (tree, backend)
}

fn embedding_bits(tree: &ConceptTree) -> Vec<(String, Vec<u32>)> {
    tree.dictionary.injected().iter().map(|(t, v)| (t.clone(), v.as_slice().iter().map(|x| x.to_bits()).collect())).collect()
}

fn cache_bits(tree: &ConceptTree) -> Vec<Option<Vec<u32>>> {
    tree.nodes
        .values()
        .map(|n| n.score_samples.cached_embeddings().map(|rows| rows.iter().flat_map(|r| r.as_slice().iter().map(|x| x.to_bits())).collect()))
        .collect()
}

#[test]
fn round_trip_is_exact_for_random_trees() {
    let dir = tempfile::tempdir().unwrap();
    let mut splits = 0;
    for seed in 0..20 {
        let (tree, backend) = random_tree(seed);
        splits += tree.build_log.len();
        let path = save_tree(&tree, &archive_path(dir.path(), &tree.tree_id)).unwrap();
        let loaded = load_tree_with_base(&path, backend.base_vocabulary()).unwrap();
        assert_eq!(loaded, tree, "seed {seed}");
        assert_eq!(embedding_bits(&loaded), embedding_bits(&tree));
        assert_eq!(cache_bits(&loaded), cache_bits(&tree));

        let detached = load_tree(&path).unwrap();
        assert!(detached.dictionary.base().is_detached());
        assert_eq!(detached.dictionary.base().fingerprint(), tree.dictionary.base().fingerprint());
        assert_eq!(embedding_bits(&detached), embedding_bits(&tree));
    }
    assert!(splits > 5, "fixtures should exercise splits");
    assert_eq!(list_archives(dir.path()).unwrap().len(), 20);
}

#[test]
fn resaving_gives_identical_manifest_bytes() {
    let (tree, backend) = random_tree(3);
    let dir = tempfile::tempdir().unwrap();
    let a = save_tree(&tree, &dir.path().join("a")).unwrap();
    let loaded = load_tree_with_base(&a, backend.base_vocabulary()).unwrap();
    let b = save_tree(&loaded, &dir.path().join("b")).unwrap();
    assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
    assert_eq!(read_schema_version(&a).unwrap(), 1);
}

#[test]
fn overwrite_replaces_the_archive_and_leaves_no_temporaries() {
    let h = Hierarchy::new();
    let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(h.space()).unwrap());
    let builder = TreeBuilder::new(backend.clone());
    let config = BuildConfig { max_depth: 1, ..BuildConfig::default() };
    let root = builder.new_tree("ow", h.root_images(1, 0.02), config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = archive_path(dir.path(), "ow");
    save_tree(&root, &path).unwrap();
    let grown = builder.run(root, &mut |_| Ok(())).unwrap();
    save_tree(&grown, &path).unwrap();
    assert_eq!(load_tree_with_base(&path, backend.base_vocabulary()).unwrap(), grown);
    let names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec!["ow".to_owned()]);
}

#[test]
fn truncated_embedding_fails_its_checksum() {
    let tree = (0..).map(|s| random_tree(s).0).find(|t| t.dictionary.injected_len() > 0).unwrap();
    let token = tree.dictionary.injected().keys().next().unwrap().clone();
    let dir = tempfile::tempdir().unwrap();
    let path = save_tree(&tree, &dir.path().join("t")).unwrap();
    let file = path.join("embeddings").join(format!("{token}.bin"));
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_tree(&path), Err(StoreError::Checksum(_))));
}

#[test]
fn tampered_manifest_is_rejected() {
    let (tree, _) = random_tree(1);
    let dir = tempfile::tempdir().unwrap();
    let path = save_tree(&tree, &dir.path().join("m")).unwrap();
    let manifest = path.join(MANIFEST);
    let mut value: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    value["schema_version"] = 7.into();
    fs::write(&manifest, serde_json::to_vec(&value).unwrap()).unwrap();
    assert!(matches!(load_tree(&path), Err(StoreError::Version { found: 7, supported: 1 })));
    fs::write(&manifest, b"{ not json").unwrap();
    assert!(matches!(load_tree(&path), Err(StoreError::Manifest(_))));
}

#[test]
fn a_foreign_vocabulary_cannot_be_attached() {
    let (tree, _) = random_tree(2);
    let dir = tempfile::tempdir().unwrap();
    let path = save_tree(&tree, &dir.path().join("v")).unwrap();
    let other = MockBackend::new(ConceptSpace { seed: 999, ..ConceptSpace::default() }).unwrap();
    assert!(matches!(load_tree_with_base(&path, other.base_vocabulary()), Err(StoreError::Dictionary(_))));
}

#[test]
fn invalid_trees_are_not_written() {
    let (mut tree, _) = random_tree(4);
    tree.nodes.get_mut(&0).unwrap().children = vec![42];
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(save_tree(&tree, &dir.path().join("bad")), Err(StoreError::Invalid(_))));
    assert!(!dir.path().join("bad").exists());
}
