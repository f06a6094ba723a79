//! Multiresolution hash encoding.
//!
//! Each level `l` overlays a grid of resolution `N_l = floor(N_min · b^l)` on
//! the unit cube. A query point reads the `F` features stored at the `2^d`
//! vertices of its cell and blends them multilinearly; the per-level results
//! are concatenated. Levels whose dense vertex grid fits in the table are
//! indexed directly, finer levels go through a spatial hash.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashEncodingConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_entry: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        HashEncodingConfig {
            levels: 10,
            table_size: 1 << 10,
            features_per_entry: 8,
            base_resolution: 2,
            growth_factor: 2.0,
        }
    }
}

impl HashEncodingConfig {
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_entry
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.table_size == 0 || self.features_per_entry == 0 {
            return Err(Error::validation("hash encoding sizes must be positive"));
        }
        if self.base_resolution == 0 || !(self.growth_factor >= 1.0) {
            return Err(Error::validation(
                "hash encoding needs base_resolution >= 1 and growth_factor >= 1",
            ));
        }
        if self.levels * self.table_size > u32::MAX as usize {
            return Err(Error::validation("hash tables too large"));
        }
        Ok(())
    }
}

/// Learnable hash tables plus the static level layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid<T> {
    pub config: HashEncodingConfig,
    pub dim: usize,
    /// `levels × table_size × features_per_entry`, entry-major.
    pub tables: Vec<T>,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
}

/// Interpolation record of a batch: for every point, level and cell corner,
/// the global table entry and its blend weight.
#[derive(Debug, Clone, Default)]
pub struct HashTrace<T> {
    pub entries: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Real> HashGrid<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: HashEncodingConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(dim == 2 || dim == 3) {
            return Err(Error::validation(format!("hash encoding supports 2D/3D, got {dim}")));
        }
        let n = config.levels * config.table_size * config.features_per_entry;
        let tables = (0..n).map(|_| T::of(rng.random_range(-1e-4..=1e-4))).collect();
        Ok(Self::with_tables(dim, config, tables))
    }

    pub(crate) fn with_tables(dim: usize, config: HashEncodingConfig, tables: Vec<T>) -> Self {
        let resolutions: Vec<usize> = (0..config.levels).map(|l| config.resolution(l)).collect();
        let dense = resolutions
            .iter()
            .map(|&r| (r + 1).checked_pow(dim as u32).is_some_and(|v| v <= config.table_size))
            .collect();
        HashGrid {
            config,
            dim,
            tables,
            resolutions,
            dense,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn corners(&self) -> usize {
        1 << self.dim
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Whether `level` uses collision-free direct indexing.
    pub fn is_dense(&self, level: usize) -> bool {
        self.dense[level]
    }

    #[inline]
    fn slot(&self, level: usize, coords: &[u32; 3]) -> usize {
        let t = self.config.table_size;
        let res = self.resolutions[level] as u32 + 1;
        let idx = if self.dense[level] {
            let mut lin = 0usize;
            for i in (0..self.dim).rev() {
                lin = lin * res as usize + coords[i] as usize;
            }
            lin
        } else {
            let mut h = 0u32;
            for i in 0..self.dim {
                h ^= coords[i].wrapping_mul(PRIMES[i]);
            }
            h as usize % t
        };
        level * t + idx
    }

    /// Encodes a single point into `out` (length `L·F`), recording the trace
    /// into `entries`/`weights` (length `L·2^d`).
    pub fn encode_point(
        &self,
        x: &[T],
        out: &mut [T],
        entries: &mut [u32],
        weights: &mut [T],
    ) -> Result<()> {
        if x.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(Error::CoordinateOutOfRange(x.iter().map(|c| c.as_f64()).collect()));
        }
        let f = self.config.features_per_entry;
        let corners = self.corners();
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut cell = [0u32; 3];
        let mut frac = [T::zero(); 3];
        let mut coords = [0u32; 3];
        for level in 0..self.config.levels {
            let res = self.resolutions[level];
            let scale = T::of(res as f64);
            for i in 0..self.dim {
                let p = x[i] * scale;
                let c = p.floor().to_usize().unwrap_or(0).min(res.saturating_sub(1));
                cell[i] = c as u32;
                frac[i] = p - T::of(c as f64);
            }
            let dst = &mut out[level * f..(level + 1) * f];
            for corner in 0..corners {
                let mut w = T::one();
                for i in 0..self.dim {
                    let bit = (corner >> i) & 1;
                    coords[i] = cell[i] + bit as u32;
                    w *= if bit == 1 { frac[i] } else { T::one() - frac[i] };
                }
                let entry = self.slot(level, &coords);
                let k = level * corners + corner;
                entries[k] = entry as u32;
                weights[k] = w;
                let src = &self.tables[entry * f..(entry + 1) * f];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Ok(())
    }

    /// Encodes `n` points laid out as `points[p * dim + i]`.
    pub fn encode_batch(&self, points: &[T]) -> Result<(Vec<T>, HashTrace<T>)> {
        let n = points.len() / self.dim;
        let width = self.output_dim();
        let per_point = self.config.levels * self.corners();
        let mut out = vec![T::zero(); n * width];
        let mut trace = HashTrace {
            entries: vec![0; n * per_point],
            weights: vec![T::zero(); n * per_point],
        };
        for p in 0..n {
            self.encode_point(
                &points[p * self.dim..(p + 1) * self.dim],
                &mut out[p * width..(p + 1) * width],
                &mut trace.entries[p * per_point..(p + 1) * per_point],
                &mut trace.weights[p * per_point..(p + 1) * per_point],
            )?;
        }
        Ok((out, trace))
    }

    /// Scatter-adds `d_encoded` (`n × L·F`) into `grad_tables` following the trace.
    pub fn backward(&self, trace: &HashTrace<T>, d_encoded: &[T], grad_tables: &mut [T]) -> Result<()> {
        let f = self.config.features_per_entry;
        let width = self.output_dim();
        let corners = self.corners();
        let per_point = self.config.levels * corners;
        if grad_tables.len() != self.tables.len()
            || trace.entries.len() * width != d_encoded.len() * per_point
        {
            return Err(Error::ShapeMismatch("hash trace / gradient buffers".into()));
        }
        let n = d_encoded.len() / width;
        for p in 0..n {
            let row = &d_encoded[p * width..(p + 1) * width];
            for level in 0..self.config.levels {
                let up = &row[level * f..(level + 1) * f];
                for corner in 0..corners {
                    let k = p * per_point + level * corners + corner;
                    let w = trace.weights[k];
                    if w == T::zero() {
                        continue;
                    }
                    let e = trace.entries[k] as usize;
                    for (g, &u) in grad_tables[e * f..(e + 1) * f].iter_mut().zip(up) {
                        *g += w * u;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Encodes one normalized coordinate.
pub fn hash_encode<T: Real>(x: &[T], grid: &HashGrid<T>) -> Result<(Vec<T>, HashTrace<T>)> {
    if x.len() != grid.dim {
        return Err(Error::ShapeMismatch(format!(
            "coordinate has {} components, encoding expects {}",
            x.len(),
            grid.dim
        )));
    }
    grid.encode_batch(x)
}
