use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Sinogram;

/// Gaussian sinogram noise at `nsd` percent of the peak value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub nsd: f64,
    pub seed: u64,
}

pub fn noise_sigma(nsd: f64, x_peak: f64) -> f64 {
    nsd / 100.0 * x_peak
}

/// Adds i.i.d. zero-mean Gaussian noise with `σ = nsd/100 · x_peak`.
///
/// Equal seeds draw the same standard normal sequence, so two levels differ
/// only by scale.
pub fn add_noise(d: &Sinogram, spec: &NoiseSpec, x_peak: f64) -> Result<Sinogram> {
    if !(spec.nsd >= 0.0 && spec.nsd.is_finite()) {
        return Err(Error::Config(format!("noise.nsd must be non-negative, got {}", spec.nsd)));
    }
    if spec.nsd == 0.0 {
        return Ok(d.clone());
    }
    if !(x_peak > 0.0 && x_peak.is_finite()) {
        return Err(Error::Config(format!("noise.x_peak must be positive, got {x_peak}")));
    }
    let normal = Normal::new(0.0, noise_sigma(spec.nsd, x_peak))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = d.clone();
    for v in out.values_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_nsd_is_identity() {
        let d = Sinogram::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = add_noise(&d, &NoiseSpec { nsd: 0.0, seed: 9 }, 0.0).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn sigma_at_low_noise_level() {
        assert!((noise_sigma(0.24, 410.0) - 0.984).abs() < 1e-12);
    }

    #[test]
    fn empirical_sigma_within_one_percent() {
        let d = Sinogram::zeros(1000, 1000);
        let out = add_noise(&d, &NoiseSpec { nsd: 0.24, seed: 5 }, 410.0).unwrap();
        let n = out.len() as f64;
        let mean = out.values().iter().sum::<f64>() / n;
        let var = out.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() / 0.984 - 1.0).abs() < 0.01, "sigma {}", var.sqrt());
    }

    #[test]
    fn seeded_and_scaled() {
        let d = Sinogram::zeros(4, 4);
        let a = add_noise(&d, &NoiseSpec { nsd: 1.0, seed: 3 }, 10.0).unwrap();
        let b = add_noise(&d, &NoiseSpec { nsd: 2.0, seed: 3 }, 10.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let c = add_noise(&d, &NoiseSpec { nsd: 1.0, seed: 4 }, 10.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_parameters() {
        let d = Sinogram::zeros(1, 1);
        assert!(add_noise(&d, &NoiseSpec { nsd: -1.0, seed: 0 }, 1.0).is_err());
        assert!(add_noise(&d, &NoiseSpec { nsd: 1.0, seed: 0 }, 0.0).is_err());
    }
}
