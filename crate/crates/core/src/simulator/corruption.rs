use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DetectorProfile, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;

/// How detector responses are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Fraction of detectors with a fluctuating response.
    pub fraction_nonideal: f64,
    /// Range the fluctuating responses are drawn from, uniformly.
    pub alpha_range: [f64; 2],
    /// Number of dead detectors (response exactly 0).
    pub n_defective: usize,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            fraction_nonideal: 0.75,
            alpha_range: [0.75, 1.25],
            n_defective: 2,
        }
    }
}

impl CorruptionSpec {
    pub fn ideal() -> Self {
        CorruptionSpec {
            fraction_nonideal: 0.0,
            alpha_range: [1.0, 1.0],
            n_defective: 0,
        }
    }
}

/// Draws a response profile: a random `fraction_nonideal` of detectors get a
/// uniform response in `alpha_range`, then `n_defective` detectors drawn
/// independently of that pool are forced to 0.
pub fn sample_detector_profile(
    geometry: &ScanGeometry,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<DetectorProfile> {
    let n = geometry.detector_count();
    if !(0.0..=1.0).contains(&spec.fraction_nonideal) {
        return Err(Error::validation("fraction_nonideal must lie in [0, 1]"));
    }
    let [lo, hi] = spec.alpha_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::validation("alpha_range must satisfy 0 < lo <= hi"));
    }
    if spec.n_defective >= n {
        return Err(Error::validation(format!(
            "n_defective ({}) must be smaller than the detector count ({n})",
            spec.n_defective
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha = vec![1.0; n];
    let n_nonideal = (spec.fraction_nonideal * n as f64).round() as usize;
    for idx in sample(&mut rng, n, n_nonideal) {
        alpha[idx] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    let mut defective = vec![false; n];
    for idx in sample(&mut rng, n, spec.n_defective) {
        alpha[idx] = 0.0;
        defective[idx] = true;
    }
    Ok(DetectorProfile { alpha, defective })
}

/// Poisson draw: sequential inversion below a mean of 30, rounded normal
/// approximation (clamped at zero) above.
pub fn poisson_sample<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda < 30.0 {
        let u: f64 = rng.random();
        let mut k = 0.0;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1.0;
            p *= lambda / k;
            cdf += p;
        }
        k
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (lambda + lambda.sqrt() * z).round().max(0.0)
    }
}

/// Noise-free corrupted measurement of one ray: `ρ - ln α` when at least one
/// photon arrives, otherwise the clamped value `ln I0` flagged invalid.
pub fn corrupt_value(rho: f64, alpha: f64, photons: f64) -> (f64, bool) {
    if alpha <= 0.0 {
        return (photons.ln(), false);
    }
    // log of the expected count, relative to one photon
    let log_count = alpha.ln() + photons.ln() - rho;
    if log_count < 0.0 {
        (photons.ln(), false)
    } else {
        (rho - alpha.ln(), true)
    }
}

/// Applies detector responses and (optionally) Poisson counting noise to an
/// ideal sinogram.
pub fn corrupt(
    sinogram: &Sinogram,
    profile: &DetectorProfile,
    photons: f64,
    noise: bool,
    seed: u64,
) -> Result<Sinogram> {
    sinogram.check()?;
    if !(photons >= 1.0 && photons.is_finite()) {
        return Err(Error::validation("photons must be at least 1"));
    }
    let n_det = sinogram.n_detectors();
    if profile.len() != n_det {
        return Err(Error::ShapeMismatch(format!(
            "profile has {} detectors, sinogram {n_det}",
            profile.len()
        )));
    }
    if sinogram.valid.iter().any(|v| !v) {
        return Err(Error::validation("input sinogram must be valid everywhere"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sinogram.clone();
    let clamp = photons.ln();
    for view in 0..sinogram.n_views() {
        for det in 0..n_det {
            let off = view * n_det + det;
            let rho = sinogram.values[off] as f64;
            let alpha = profile.alpha[det];
            let (value, valid) = if noise {
                let expected = alpha * photons * (-rho).exp();
                let count = poisson_sample(expected, &mut rng);
                if count < 1.0 {
                    (clamp, false)
                } else {
                    (-(count / photons).ln(), true)
                }
            } else {
                corrupt_value(rho, alpha, photons)
            };
            out.values[off] = value as f32;
            out.valid[off] = valid;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorCount;

    fn line_geometry(n: usize, views: usize) -> ScanGeometry {
        ScanGeometry {
            n_views: views,
            n_detectors: DetectorCount::Line(n),
            ..ScanGeometry::fan2d_default()
        }
    }

    #[test]
    fn default_profile_has_two_dead_and_many_fluctuating() {
        let g = line_geometry(500, 1);
        let p = sample_detector_profile(&g, &CorruptionSpec::default(), 1).unwrap();
        assert_eq!(p.alpha.iter().filter(|&&a| a == 0.0).count(), 2);
        assert_eq!(p.defective_indices().len(), 2);
        let fluct = p.alpha.iter().filter(|&&a| a != 0.0 && a != 1.0).count();
        assert!((370..=375).contains(&fluct), "{fluct}");
        assert!(p
            .alpha
            .iter()
            .all(|&a| a == 0.0 || (0.75..=1.25).contains(&a)));
        for (a, d) in p.alpha.iter().zip(&p.defective) {
            assert_eq!(*d, *a == 0.0);
        }
    }

    #[test]
    fn ideal_spec_gives_unit_responses() {
        let g = line_geometry(64, 1);
        let p = sample_detector_profile(&g, &CorruptionSpec::ideal(), 5).unwrap();
        assert!(p.alpha.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn profile_is_seed_deterministic_and_validated() {
        let g = line_geometry(100, 1);
        let s = CorruptionSpec::default();
        assert_eq!(
            sample_detector_profile(&g, &s, 9).unwrap(),
            sample_detector_profile(&g, &s, 9).unwrap()
        );
        let bad = CorruptionSpec {
            n_defective: 100,
            ..s
        };
        assert!(sample_detector_profile(&g, &bad, 9).is_err());
    }

    #[test]
    fn analytic_corruption_values() {
        let (v, ok) = corrupt_value(1.0, 1.0, 1e7);
        assert!(ok && (v - 1.0).abs() < 1e-12);
        let (v, ok) = corrupt_value(1.0, 0.5, 1e7);
        assert!(ok && (v - (1.0 + 2f64.ln())).abs() < 1e-12);
        assert!((v - 1.693147).abs() < 1e-6);
        let (v, ok) = corrupt_value(1.0, 0.0, 1e7);
        assert!(!ok);
        assert!((v - 16.118_095_650_958_32).abs() < 1e-12);
    }

    #[test]
    fn ideal_profile_without_noise_is_identity() {
        let g = line_geometry(8, 3);
        let mut s = Sinogram::zeros(&g);
        for (i, v) in s.values.iter_mut().enumerate() {
            *v = 0.37 * i as f32;
        }
        let out = corrupt(&s, &DetectorProfile::ideal(8), 1e7, false, 0).unwrap();
        assert_eq!(out.values, s.values);
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn dead_detector_is_flagged_and_finite() {
        let g = line_geometry(4, 5);
        let s = Sinogram::zeros(&g);
        let profile = DetectorProfile::from_alpha(vec![1.0, 0.0, 0.9, 1.1]).unwrap();
        for noise in [false, true] {
            let out = corrupt(&s, &profile, 1e7, noise, 3).unwrap();
            assert_eq!(out.invalid_detectors(), vec![1]);
            assert!(out.values.iter().all(|v| v.is_finite()));
            assert!((out.get(0, 1) as f64 - 1e7f64.ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn poisson_small_mean_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| poisson_sample(3.5, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 3.5).abs() < 0.05, "{mean}");
        assert!((var - 3.5).abs() < 0.15, "{var}");
    }

    #[test]
    fn noisy_log_measurement_is_unbiased() {
        // Monte-Carlo oracle: recovered ρ̃ averages back to ρ.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let photons = 1e7;
        let rho = 1.0;
        let n = 10_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let c = poisson_sample(photons * (-rho as f64).exp(), &mut rng);
                -(c / photons).ln()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - rho).abs() <= 3.0 * se, "{mean} ± {se}");
    }
}
