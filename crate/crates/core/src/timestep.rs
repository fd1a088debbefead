//! Importance sampling of diffusion timesteps.
//!
//! Weights follow `f(t) = (1 - alpha * cos(pi * t / T)) / T` on `t = 1..=T`,
//! renormalized after discretization. `alpha = 0` is uniform; larger `alpha`
//! shifts mass toward noisy timesteps.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("need at least one timestep")]
    NoSteps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepDistribution {
    steps: u32,
    alpha: f64,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

/// Unnormalized density at timestep `t` of `steps`.
pub fn skewed_density(t: u32, steps: u32, alpha: f64) -> f64 {
    let steps_f = steps as f64;
    (1.0 - alpha * (std::f64::consts::PI * t as f64 / steps_f).cos()) / steps_f
}

impl TimestepDistribution {
    pub fn new(steps: u32, alpha: f64) -> Result<Self, SamplerError> {
        if steps == 0 {
            return Err(SamplerError::NoSteps);
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SamplerError::Alpha(alpha));
        }
        let raw: Vec<f64> = (1..=steps).map(|t| skewed_density(t, steps, alpha)).collect();
        let total: f64 = raw.iter().sum();
        let pmf: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Guard against the last entry landing just below 1.
        *cdf.last_mut().expect("steps >= 1") = 1.0;
        Ok(Self { steps, alpha, pmf, cdf })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Probabilities for `t = 1..=T` (index `t - 1`).
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn probability(&self, t: u32) -> f64 {
        if t == 0 || t > self.steps {
            0.0
        } else {
            self.pmf[(t - 1) as usize]
        }
    }

    /// Inverse-transform draw in `1..=T`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        (idx.min(self.cdf.len() - 1) + 1) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_when_alpha_zero() {
        let d = TimestepDistribution::new(1000, 0.0).unwrap();
        for p in d.pmf() {
            assert!((p - 1e-3).abs() < 1e-15);
        }
    }

    #[test]
    fn end_ratio_approaches_three() {
        let steps = 1000;
        let d = TimestepDistribution::new(steps, 0.5).unwrap();
        let ratio = d.probability(steps) / d.probability(1);
        let expected = 1.5 / (1.0 - 0.5 * (std::f64::consts::PI / steps as f64).cos());
        assert!((ratio - expected).abs() < 1e-9);
        assert!((ratio - 3.0).abs() < 1e-4);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(TimestepDistribution::new(0, 0.5), Err(SamplerError::NoSteps));
        assert_eq!(TimestepDistribution::new(10, -0.1), Err(SamplerError::Alpha(-0.1)));
        assert_eq!(TimestepDistribution::new(10, 1.1), Err(SamplerError::Alpha(1.1)));
    }

    #[test]
    fn draws_are_in_range_and_reproducible() {
        let d = TimestepDistribution::new(7, 1.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        assert!(a.iter().all(|&t| (1..=7).contains(&t)));
        assert!(TimestepDistribution::new(1, 0.5).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(0)) == 1);
    }
}
