//! Random Fourier features `[cos 2πBx, sin 2πBx]` with a frozen Gaussian `B`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatures<T> {
    pub dim: usize,
    pub n_frequencies: usize,
    pub scale: f64,
    pub seed: u64,
    /// `n_frequencies × dim`, row-major.
    pub matrix: Vec<T>,
}

impl<T: Real> FourierFeatures<T> {
    pub fn new(dim: usize, n_frequencies: usize, scale: f64, seed: u64) -> Result<Self> {
        if n_frequencies == 0 || !(scale > 0.0) {
            return Err(Error::validation("fourier features need n_frequencies >= 1 and scale > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..n_frequencies * dim)
            .map(|_| T::of(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(FourierFeatures {
            dim,
            n_frequencies,
            scale,
            seed,
            matrix,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.n_frequencies
    }

    pub fn encode_point(&self, x: &[T], out: &mut [T]) -> Result<()> {
        if x.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(Error::CoordinateOutOfRange(x.iter().map(|c| c.as_f64()).collect()));
        }
        let two_pi = T::of(std::f64::consts::TAU);
        let n = self.n_frequencies;
        for j in 0..n {
            let row = &self.matrix[j * self.dim..(j + 1) * self.dim];
            let phase = two_pi * row.iter().zip(x).fold(T::zero(), |acc, (&b, &c)| acc + b * c);
            let (s, c) = phase.sin_cos();
            out[j] = c;
            out[n + j] = s;
        }
        Ok(())
    }

    pub fn encode_batch(&self, points: &[T]) -> Result<Vec<T>> {
        let n = points.len() / self.dim;
        let width = self.output_dim();
        let mut out = vec![T::zero(); n * width];
        for p in 0..n {
            self.encode_point(
                &points[p * self.dim..(p + 1) * self.dim],
                &mut out[p * width..(p + 1) * width],
            )?;
        }
        Ok(out)
    }
}

/// One-shot Fourier encoding of `x` with a matrix drawn from `seed`.
pub fn fourier_encode<T: Real>(x: &[T], n_frequencies: usize, scale: f64, seed: u64) -> Result<Vec<T>> {
    FourierFeatures::new(x.len(), n_frequencies, scale, seed)?.encode_batch(x)
}
