use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{CountProfile, DataError, LongTailDataset};

/// Isotropic Gaussian classes with means on a scaled orthonormal frame.
///
/// Means are `separation / √2` times random orthonormal vectors, so every pair
/// of means is exactly `separation` apart. This needs `dim >= classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl GaussianMixture {
    pub fn new(classes: usize, dim: usize, separation: f64, sigma: f64, seed: u64) -> Result<Self, DataError> {
        if dim < 2 {
            return Err(DataError::Validation(format!("dimension must be >= 2, got {dim}")));
        }
        if !(separation > 0.0) || !separation.is_finite() {
            return Err(DataError::Validation(format!(
                "class separation must be positive, got {separation}"
            )));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(DataError::Validation(format!("noise sigma must be >= 0, got {sigma}")));
        }
        if classes > dim {
            return Err(DataError::Placement { classes, dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = separation / std::f64::consts::SQRT_2;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while basis.len() < classes {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // two Gram-Schmidt passes keep the frame orthonormal to rounding
            for _ in 0..2 {
                for b in &basis {
                    let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let means = basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect();
        Ok(Self { means, sigma })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Draws `profile.counts()[c]` samples of class `c`, class-major order.
    pub fn sample(&self, profile: &CountProfile, seed: u64) -> Result<LongTailDataset, DataError> {
        if profile.num_classes() != self.means.len() {
            return Err(DataError::Validation(format!(
                "profile has {} classes but the mixture has {}",
                profile.num_classes(),
                self.means.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.sigma).map_err(|e| DataError::Validation(e.to_string()))?;
        let dim = self.dim();
        let mut features = Vec::with_capacity(profile.total() * dim);
        let mut labels = Vec::with_capacity(profile.total());
        for (class, (&count, mean)) in profile.counts().iter().zip(&self.means).enumerate() {
            for _ in 0..count {
                features.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
                labels.push(class);
            }
        }
        LongTailDataset::new(dim, features, labels, profile.clone())
    }
}

/// Mixture means come from `seed`; sample noise from a stream derived from it.
pub fn synth_gaussian(
    profile: &CountProfile,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<LongTailDataset, DataError> {
    GaussianMixture::new(profile.num_classes(), dim, separation, sigma, seed)?
        .sample(profile, seed ^ 0x5EED_DA7A_0000_0001)
}
