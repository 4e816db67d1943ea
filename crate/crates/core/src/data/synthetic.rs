use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Result};
use crate::tensor::Tensor;

/// Gaussian class clusters: each class has a mean drawn from
/// `N(0, separation^2 I)` and samples are `mean + N(0, noise^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub features: usize,
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(features: usize, classes: usize, seed: u64) -> Self {
        Self {
            features,
            classes,
            separation: default_separation(),
            noise: default_noise(),
            seed,
        }
    }

    fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.separation).expect("finite separation");
        (0..self.classes)
            .map(|_| (0..self.features).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }

    /// `n` samples with labels cycling through the classes, so every class
    /// receives `n / classes` examples (plus one for the first `n % classes`).
    /// `stream` selects an independent sample stream over the same centers.
    pub fn generate(&self, n: usize, stream: u64) -> Result<Dataset> {
        let centers = self.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let noise = Normal::new(0.0, self.noise).expect("finite noise");
        let mut data = Vec::with_capacity(n * self.features);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.classes;
            data.extend(centers[label].iter().map(|c| c + noise.sample(&mut rng)));
            labels.push(label);
        }
        Dataset::new(Tensor::new(vec![n, self.features], data)?, labels, self.classes)
    }

    /// Training and held-out test sets drawn from the same clusters.
    pub fn generate_split(&self, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
        Ok((self.generate(train, 0)?, self.generate(test, 1)?))
    }
}
