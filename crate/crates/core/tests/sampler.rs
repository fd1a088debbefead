use aspectree::backend::mock::{ConceptSpace, MockBackend};
use aspectree::fixtures::planted_clusters;
use aspectree::{Backend, BuildConfig, TimestepDistribution, TokenDictionary, TrainJob};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_passes(counts: &[u64], probs: &[f64], significance: f64) -> (bool, f64, f64) {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = n as f64 * p;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(1.0 - significance);
    (stat < critical, stat, critical)
}

fn histogram(dist: &TimestepDistribution, draws: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; dist.steps() as usize];
    for _ in 0..draws {
        counts[(dist.sample(&mut rng) - 1) as usize] += 1;
    }
    counts
}

#[test]
fn pmf_matches_direct_formula() {
    let (t_max, alpha) = (1000u32, 0.5);
    let dist = TimestepDistribution::new(t_max, alpha).unwrap();
    let raw: Vec<f64> = (1..=t_max)
        .map(|t| (1.0 - alpha * (std::f64::consts::PI * t as f64 / t_max as f64).cos()) / t_max as f64)
        .collect();
    let z: f64 = raw.iter().sum();
    for (p, r) in dist.pmf().iter().zip(&raw) {
        assert!((p - r / z).abs() < 1e-12);
    }
    assert!((dist.pmf().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(dist.pmf().windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn skewed_histogram_passes_chi_square() {
    let dist = TimestepDistribution::new(1000, 0.5).unwrap();
    let counts = histogram(&dist, 1_000_000, 11);
    let (ok, stat, crit) = chi_square_passes(&counts, dist.pmf(), 0.01);
    assert!(ok, "chi-square {stat} >= {crit}");
}

#[test]
fn uniform_mean_within_three_standard_errors() {
    let t_max = 1000u32;
    let dist = TimestepDistribution::new(t_max, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let mean = (0..n).map(|_| dist.sample(&mut rng) as f64).sum::<f64>() / n as f64;
    let var = ((t_max as f64).powi(2) - 1.0) / 12.0;
    let se = (var / n as f64).sqrt();
    assert!((mean - (t_max as f64 + 1.0) / 2.0).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn training_draws_follow_the_skewed_pmf() {
    let backend = MockBackend::new(ConceptSpace::default().quadratic()).unwrap();
    let centroids = vec![vec![1.0; 16], vec![-1.0; 16]];
    let images = planted_clusters(&centroids, 5, 0.1, 3);
    let dict = TokenDictionary::new(backend.base_vocabulary()).extend(&["a_v1", "a_v2"], "object").unwrap();
    let mut job = TrainJob::new(&backend, images, "a_v1", "a_v2", dict, BuildConfig::default(), 9).unwrap().with_budget(5000);
    job.train_pair(&backend, 5000).unwrap();
    let draws = job.timestep_history();
    assert_eq!(draws.len(), 10_000);

    // 100 bins of 10 timesteps keep every expected count above 50.
    let dist = TimestepDistribution::new(backend.schedule().steps(), 0.5).unwrap();
    let mut counts = vec![0u64; 100];
    for &t in draws {
        counts[((t - 1) / 10) as usize] += 1;
    }
    let probs: Vec<f64> = dist.pmf().chunks(10).map(|c| c.iter().sum()).collect();
    let (ok, stat, crit) = chi_square_passes(&counts, &probs, 0.01);
    assert!(ok, "chi-square {stat} >= {crit}");
}
