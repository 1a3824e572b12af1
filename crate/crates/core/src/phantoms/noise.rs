use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::operators::Sinogram;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub photons_per_pixel: f64,
    pub attenuation: f64,
    pub count_floor: f64,
}

impl NoiseModel {
    pub fn new(photons_per_pixel: f64, attenuation: f64, count_floor: f64) -> Result<Self> {
        if !(photons_per_pixel > 0.0 && photons_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "photon count must be positive, got {photons_per_pixel}"
            )));
        }
        if !(attenuation > 0.0 && attenuation.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attenuation must be positive, got {attenuation}"
            )));
        }
        if !(count_floor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "count floor must be at least 1, got {count_floor}"
            )));
        }
        Ok(NoiseModel {
            photons_per_pixel,
            attenuation,
            count_floor,
        })
    }

    pub fn mean_counts(&self, line_integral: f64) -> f64 {
        self.photons_per_pixel * (-self.attenuation * line_integral.max(0.0)).exp()
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            photons_per_pixel: 8000.0,
            attenuation: 0.02,
            count_floor: 1.0,
        }
    }
}

pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(mean)
}

/// Photon counts drawn Poisson with mean `λ exp(-μ s)`; negative line integrals count as 0.
pub fn simulate_counts<R: Rng + ?Sized>(sino: &Sinogram, noise: &NoiseModel, rng: &mut R) -> Vec<f64> {
    sino.values
        .iter()
        .map(|&s| poisson(rng, noise.mean_counts(s)))
        .collect()
}

/// Pre-log floor and `-log(c / λ) / μ`.
pub fn linearize(counts: &[f64], n_angles: usize, n_detectors: usize, noise: &NoiseModel) -> Result<Sinogram> {
    let values = counts
        .iter()
        .map(|&c| -(c.max(noise.count_floor) / noise.photons_per_pixel).ln() / noise.attenuation)
        .collect();
    Sinogram::new(n_angles, n_detectors, values)
}
