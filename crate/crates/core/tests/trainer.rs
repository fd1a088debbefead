use aspectree::backend::mock::{ConceptSpace, MockBackend};
use aspectree::fixtures::{planted_clusters, random_unit, Hierarchy};
use aspectree::trainer::{TrainError, TrainJob};
use aspectree::{Backend, BuildConfig, ImageSet, TokenDictionary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LEFT: &str = "t_v1";
const RIGHT: &str = "t_v2";

/// Pure reconstruction surface; one SGD step at the default rate contracts
/// the condition toward the batch mean by 3.2%.
fn quadratic_backend() -> MockBackend {
    let mut space = ConceptSpace::default().quadratic();
    space.loss_gain = 8.0;
    MockBackend::new(space).unwrap()
}

fn two_clusters(seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = vec![random_unit(&mut rng, 16), random_unit(&mut rng, 16)];
    planted_clusters(&centroids, 5, 0.1, seed)
}

fn job(backend: &dyn Backend, images: ImageSet, seed: u64) -> TrainJob {
    let dict = TokenDictionary::new(backend.base_vocabulary()).extend(&[LEFT, RIGHT], "object").unwrap();
    TrainJob::new(backend, images, LEFT, RIGHT, dict, BuildConfig::default(), seed).unwrap()
}

fn latent_mean(backend: &dyn Backend, images: &ImageSet) -> Vec<f64> {
    let latents: Vec<Vec<f64>> = images.images().iter().map(|im| backend.encode_image(im).unwrap()).collect();
    (0..latents[0].len()).map(|k| latents.iter().map(|z| z[k]).sum::<f64>() / latents.len() as f64).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_gap(job: &TrainJob, optimum: &[f64]) -> f64 {
    let (l, r) = job.snapshot_embeddings();
    let c: Vec<f64> = l.to_f64().iter().zip(r.to_f64()).map(|(a, b)| (a + b) / 2.0).collect();
    let diff: Vec<f64> = c.iter().zip(optimum).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(optimum)
}

#[test]
fn converges_to_the_quadratic_optimum_in_200_steps() {
    let backend = quadratic_backend();
    let h = Hierarchy::new();
    for seed in [0, 1000, 1234, 111] {
        let images = planted_clusters(&[h.x.clone(), h.y()], 5, 0.05, seed + 7);
        let optimum = latent_mean(&backend, &images);
        let mut job = job(&backend, images, seed);
        job.train_pair(&backend, 200).unwrap();
        let rel = relative_gap(&job, &optimum);
        assert!(rel < 1e-2, "seed {seed}: relative error {rel}");
    }
}

#[test]
fn full_batch_descent_reaches_the_optimum() {
    let backend = quadratic_backend();
    let images = two_clusters(2);
    let optimum = latent_mean(&backend, &images);
    let dict = TokenDictionary::new(backend.base_vocabulary()).extend(&[LEFT, RIGHT], "object").unwrap();
    let config = BuildConfig { batch_size: images.len(), ..BuildConfig::default() };
    let mut job = TrainJob::new(&backend, images, LEFT, RIGHT, dict, config, 0).unwrap();
    job.train_pair(&backend, 1000).unwrap();
    assert!(relative_gap(&job, &optimum) < 1e-6);
}

#[test]
fn training_is_deterministic_per_seed() {
    let backend = MockBackend::new(ConceptSpace::default()).unwrap();
    let images = two_clusters(3);
    let mut a = job(&backend, images.clone(), 5);
    let mut b = job(&backend, images.clone(), 5);
    let mut c = job(&backend, images, 6);
    a.train_pair(&backend, 50).unwrap();
    b.train_pair(&backend, 50).unwrap();
    c.train_pair(&backend, 50).unwrap();
    assert_eq!(a.loss_history(), b.loss_history());
    assert_eq!(a.dictionary(), b.dictionary());
    assert_ne!(a.loss_history(), c.loss_history());
}

#[test]
fn split_runs_equal_one_run() {
    let backend = MockBackend::new(ConceptSpace::default()).unwrap();
    let images = two_clusters(4);
    let mut whole = job(&backend, images.clone(), 9);
    whole.train_pair(&backend, 60).unwrap();
    let mut parts = job(&backend, images, 9);
    parts.train_pair(&backend, 25).unwrap();
    parts.train_pair(&backend, 35).unwrap();
    assert_eq!(whole.loss_history(), parts.loss_history());
    assert_eq!(whole.dictionary(), parts.dictionary());
    assert_eq!(parts.step(), 60);
}

#[test]
fn only_the_two_sibling_tokens_change() {
    let backend = MockBackend::new(ConceptSpace::default()).unwrap();
    let base = TokenDictionary::new(backend.base_vocabulary()).extend(&["t_v0", LEFT, RIGHT], "object").unwrap();
    let checksum = base.base_checksum();
    let mut job = TrainJob::new(&backend, two_clusters(5), LEFT, RIGHT, base.clone(), BuildConfig::default(), 0).unwrap();
    let (l0, r0) = job.snapshot_embeddings();
    assert_eq!(&l0, backend.base_vocabulary().get("object").unwrap());
    assert_eq!(l0, r0);
    job.train_pair(&backend, 40).unwrap();
    let trained = job.dictionary();
    assert_eq!(trained.base_checksum(), checksum);
    assert_eq!(trained.get("t_v0"), base.get("t_v0"));
    assert_ne!(trained.get(LEFT), base.get(LEFT));
    assert_ne!(trained.get(LEFT), trained.get(RIGHT));
    assert_eq!(trained.injected_len(), 3);
}

#[test]
fn loss_decreases_over_training() {
    let backend = MockBackend::new(ConceptSpace::default()).unwrap();
    let mut job = job(&backend, two_clusters(6), 1000);
    let losses = job.train_pair(&backend, 300).unwrap().to_vec();
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[250..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "{tail} >= {head}");
    assert_eq!(job.timestep_history().len(), 300 * 2);
}

#[test]
fn rejects_invalid_jobs() {
    let backend = MockBackend::new(ConceptSpace::default()).unwrap();
    let dict = TokenDictionary::new(backend.base_vocabulary()).extend(&[LEFT, RIGHT], "object").unwrap();
    let cfg = BuildConfig::default();
    let err = TrainJob::new(&backend, ImageSet::new(vec![]), LEFT, RIGHT, dict.clone(), cfg.clone(), 0).unwrap_err();
    assert!(matches!(err, TrainError::NoImages));
    let err = TrainJob::new(&backend, two_clusters(1), LEFT, LEFT, dict.clone(), cfg.clone(), 0).unwrap_err();
    assert!(matches!(err, TrainError::SameToken(_)));
    let err = TrainJob::new(&backend, two_clusters(1), LEFT, "t_v3", dict.clone(), cfg.clone(), 0).unwrap_err();
    assert!(matches!(err, TrainError::NotInjected(_)));

    let mut job = TrainJob::new(&backend, two_clusters(1), LEFT, RIGHT, dict, cfg, 0).unwrap().with_budget(10);
    assert!(matches!(job.train_pair(&backend, 0), Err(TrainError::ZeroSteps)));
    job.train_pair(&backend, 10).unwrap();
    assert!(matches!(job.train_pair(&backend, 1), Err(TrainError::BudgetExceeded { done: 10, .. })));
}
