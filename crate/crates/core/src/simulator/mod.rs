//! Measurement simulation: phantoms, line integrals, and detector corruption.

mod corruption;
mod phantom;
mod projector;
mod scan;

pub use corruption::{
    corrupt, corrupt_value, poisson_sample, sample_detector_profile, CorruptionSpec,
};
pub use phantom::{
    random_ellipse_phantom, shepp_logan, shepp_logan_value, Ellipse, SHEPP_LOGAN_2D,
    SHEPP_LOGAN_3D,
};
pub use projector::{ideal_sinogram, line_integral};
pub use scan::{make_phantom, simulate_scan, PhantomKind, SimulatedScan, SimulationConfig};

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;

/// Attenuation image or volume, `x` fastest in storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub shape: Vec<usize>,
    pub voxel_size: Vec<f64>,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(shape: Vec<usize>, voxel_size: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() != voxel_size.len() || values.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} with {} voxel sizes and {} values",
                voxel_size.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                group: format!("image value {bad}"),
                iteration: None,
            });
        }
        Ok(ImageGrid {
            shape,
            voxel_size,
            values,
        })
    }

    pub fn zeros(shape: Vec<usize>, voxel_size: Vec<f64>) -> Self {
        let n = shape.iter().product();
        ImageGrid {
            shape,
            voxel_size,
            values: vec![0.0; n],
        }
    }

    pub fn zeros_like(geometry: &ScanGeometry) -> Self {
        Self::zeros(geometry.grid_shape.clone(), geometry.voxel_size.clone())
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for i in (0..self.dim()).rev() {
            lin = lin * self.shape[i] + idx[i];
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.index(idx)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ImageGrid {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn matches(&self, geometry: &ScanGeometry) -> bool {
        self.shape == geometry.grid_shape
            && self
                .voxel_size
                .iter()
                .zip(&geometry.voxel_size)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
    }

    /// Multilinear interpolation at a point in mm (grid centred on the
    /// origin); samples outside the grid read as zero.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let dim = self.dim();
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for i in 0..dim {
            let f = p[i] / self.voxel_size[i] + 0.5 * self.shape[i] as f64 - 0.5;
            let fl = f.floor();
            base[i] = fl as isize;
            frac[i] = f - fl;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut lin = 0usize;
            let mut stride = 1usize;
            let mut inside = true;
            for i in 0..dim {
                let bit = (corner >> i) & 1;
                let c = base[i] + bit as isize;
                if c < 0 || c >= self.shape[i] as isize {
                    inside = false;
                    break;
                }
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                lin += c as usize * stride;
                stride *= self.shape[i];
            }
            if inside && w != 0.0 {
                acc += w * self.values[lin];
            }
        }
        acc
    }
}

/// Log-domain measurements indexed `[view][detector]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    pub values: Vec<f32>,
    /// False where the raw photon count fell below one before clamping.
    pub valid: Vec<bool>,
}

impl Sinogram {
    pub fn zeros(geometry: &ScanGeometry) -> Self {
        let n = geometry.n_views * geometry.detector_count();
        Sinogram {
            geometry: geometry.clone(),
            values: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views
    }

    pub fn n_detectors(&self) -> usize {
        self.geometry.detector_count()
    }

    #[inline]
    pub fn offset(&self, view: usize, detector: usize) -> usize {
        view * self.n_detectors() + detector
    }

    #[inline]
    pub fn get(&self, view: usize, detector: usize) -> f32 {
        self.values[self.offset(view, detector)]
    }

    #[inline]
    pub fn is_valid(&self, view: usize, detector: usize) -> bool {
        self.valid[self.offset(view, detector)]
    }

    pub fn row(&self, view: usize) -> &[f32] {
        let n = self.n_detectors();
        &self.values[view * n..(view + 1) * n]
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n_views() * self.n_detectors();
        if self.values.len() != n || self.valid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sinogram holds {} values / {} flags, geometry needs {n}",
                self.values.len(),
                self.valid.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                group: "sinogram".into(),
                iteration: None,
            });
        }
        Ok(())
    }

    /// Columns (detectors) flagged invalid in every view.
    pub fn invalid_detectors(&self) -> Vec<usize> {
        (0..self.n_detectors())
            .filter(|&d| (0..self.n_views()).all(|v| !self.is_valid(v, d)))
            .collect()
    }
}

/// Ground-truth per-detector response.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorProfile {
    pub alpha: Vec<f64>,
    pub defective: Vec<bool>,
}

impl DetectorProfile {
    pub fn ideal(n: usize) -> Self {
        DetectorProfile {
            alpha: vec![1.0; n],
            defective: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::validation("response factors must be finite and >= 0"));
        }
        let defective = alpha.iter().map(|&a| a == 0.0).collect();
        Ok(DetectorProfile { alpha, defective })
    }

    pub fn defective_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.defective[i]).collect()
    }
}
