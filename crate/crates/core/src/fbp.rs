//! Fan-beam filtered backprojection for flat, equidistant detectors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mode, ScanGeometry};
use crate::simulator::{ImageGrid, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    RamLak,
    Hann,
}

/// Spatial ramp kernel on the detector grid rescaled to the rotation axis.
/// `kernel[n_detectors + k]` is the tap at offset `k` for `|k| <= n_detectors`;
/// the integration step is folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct RampFilter {
    pub kernel: Vec<f64>,
    pub spacing: f64,
    pub n_detectors: usize,
}

impl RampFilter {
    pub fn new(n_detectors: usize, spacing: f64, window: Window) -> Result<Self> {
        if n_detectors == 0 || !(spacing > 0.0) {
            return Err(Error::validation("ramp filter needs detectors and a positive spacing"));
        }
        let half = n_detectors as isize;
        let tap = |k: isize| match k {
            0 => 1.0 / (4.0 * spacing),
            k if k % 2 != 0 => -1.0 / (PI * PI * (k * k) as f64 * spacing),
            _ => 0.0,
        };
        let mut kernel: Vec<f64> = (-half..=half).map(tap).collect();
        let edge = kernel.len() - 1;
        if window == Window::Hann {
            let src = kernel.clone();
            for i in 1..edge {
                kernel[i] = 0.5 * src[i] + 0.25 * (src[i - 1] + src[i + 1]);
            }
        }
        // Truncation leaves a small DC term. Offsets of ±n_detectors never
        // pair two samples of one row, so the outermost taps absorb it
        // without changing any filtered row.
        kernel[0] = 0.0;
        kernel[edge] = 0.0;
        let leak: f64 = kernel.iter().sum();
        kernel[0] = -0.5 * leak;
        kernel[edge] = -0.5 * leak;
        Ok(RampFilter {
            kernel,
            spacing,
            n_detectors,
        })
    }

    pub fn for_geometry(geometry: &ScanGeometry, window: Window) -> Result<Self> {
        let (_, cols) = geometry.detector_panel();
        RampFilter::new(cols, iso_spacing(geometry), window)
    }

    /// Linear convolution of `row` with the kernel, cropped to the row.
    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_detectors {
            return Err(Error::ShapeMismatch(format!(
                "row of {} samples for a {}-detector filter",
                row.len(),
                self.n_detectors
            )));
        }
        let n = row.len();
        let c = n;
        Ok((0..n)
            .map(|j| {
                row.iter()
                    .enumerate()
                    .map(|(i, &v)| v * self.kernel[c + j - i])
                    .sum()
            })
            .collect())
    }
}

pub fn ramp_filter(row: &[f64], filter: &RampFilter) -> Result<Vec<f64>> {
    filter.apply(row)
}

/// Detector pitch projected onto the rotation axis.
fn iso_spacing(g: &ScanGeometry) -> f64 {
    g.detector_spacing * g.source_to_center / (g.source_to_center + g.center_to_detector)
}

/// Reconstructs a full-rotation fan-beam sinogram onto the geometry's grid.
/// Invalid entries are used as stored.
pub fn fbp_reconstruct(sinogram: &Sinogram, window: Window) -> Result<ImageGrid> {
    let g = &sinogram.geometry;
    sinogram.check()?;
    if g.mode != Mode::Fan2d {
        return Err(Error::Unsupported("FBP is implemented for fan-beam 2D scans only".into()));
    }
    let [start, end] = g.view_range;
    if ((end - start) - 360.0).abs() > 1e-6 {
        return Err(Error::Unsupported(format!(
            "FBP needs a full 360 degree scan, got [{start}, {end}]"
        )));
    }
    let n_det = sinogram.n_detectors();
    let filter = RampFilter::for_geometry(g, window)?;
    let ds = filter.spacing;
    let r = g.source_to_center;
    let centre = 0.5 * (n_det as f64 - 1.0);
    let d_beta = 2.0 * PI / g.n_views as f64;

    let pixels: Vec<[f64; 3]> = g.voxel_centers().collect();
    let mut values = vec![0.0; pixels.len()];
    let mut weighted = vec![0.0; n_det];
    for view in 0..g.n_views {
        let row = sinogram.row(view);
        for (j, w) in weighted.iter_mut().enumerate() {
            let s = (j as f64 - centre) * ds;
            *w = row[j] as f64 * r / (r * r + s * s).sqrt();
        }
        let q = filter.apply(&weighted)?;
        let (sin, cos) = g.view_angle(view).sin_cos();
        for (v, p) in values.iter_mut().zip(&pixels) {
            let along = p[0] * cos + p[1] * sin;
            let across = -p[0] * sin + p[1] * cos;
            let denom = r - along;
            if denom <= 0.0 {
                continue;
            }
            let u = denom / r;
            let pos = r * across / denom / ds + centre;
            let i0 = pos.floor();
            if i0 < 0.0 || i0 + 1.0 > (n_det - 1) as f64 {
                continue;
            }
            let k = i0 as usize;
            let frac = pos - i0;
            let sample = q[k] * (1.0 - frac) + q[k + 1] * frac;
            *v += 0.5 * d_beta * sample / (u * u);
        }
    }
    ImageGrid::new(g.grid_shape.clone(), g.voxel_size.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorCount;
    use crate::metrics::psnr;
    use crate::simulator::{
        corrupt, ideal_sinogram, sample_detector_profile, shepp_logan, CorruptionSpec,
    };

    fn geometry(n: usize, voxel: f64) -> ScanGeometry {
        ScanGeometry {
            grid_shape: vec![n, n],
            voxel_size: vec![voxel, voxel],
            ..ScanGeometry::fan2d_default()
        }
    }

    #[test]
    fn kernel_is_symmetric_with_zero_dc() {
        for window in [Window::RamLak, Window::Hann] {
            let f = RampFilter::new(101, 1.0, window).unwrap();
            let n = f.kernel.len();
            for i in 0..n {
                assert_eq!(f.kernel[i], f.kernel[n - 1 - i]);
            }
            let peak = f.kernel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(f.kernel.iter().sum::<f64>().abs() <= 1e-6 * peak);
        }
    }

    #[test]
    fn ram_lak_taps() {
        let f = RampFilter::new(64, 2.0, Window::RamLak).unwrap();
        let c = 64;
        assert_eq!(f.kernel[c + 2], 0.0);
        assert!((f.kernel[c + 1] - (-1.0 / (PI * PI * 2.0))).abs() < 1e-15);
        assert!((f.kernel[c + 3] - (-1.0 / (9.0 * PI * PI * 2.0))).abs() < 1e-15);
    }

    #[test]
    fn filter_is_linear_and_reproduces_the_kernel() {
        let f = RampFilter::new(33, 1.5, Window::RamLak).unwrap();
        assert!(f.apply(&[0.0; 33]).unwrap().iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..33).map(|i| (i as f64 * 0.37).sin()).collect();
        let fx = f.apply(&x).unwrap();
        let ax: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
        let scale = fx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in f.apply(&ax).unwrap().iter().zip(&fx) {
            assert!((a - 3.5 * b).abs() <= 1e-9 * 3.5 * scale);
        }
        let mut impulse = vec![0.0; 33];
        impulse[16] = 1.0;
        let out = ramp_filter(&impulse, &f).unwrap();
        for j in 0..33 {
            assert_eq!(out[j], f.kernel[33 + j - 16]);
        }
        assert!(matches!(f.apply(&[1.0; 5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = geometry(32, 8.0);
        let img = fbp_reconstruct(&Sinogram::zeros(&g), Window::RamLak).unwrap();
        assert!(img.values.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn fbp_is_linear() {
        let g = ScanGeometry {
            n_views: 90,
            ..geometry(48, 5.0)
        };
        let on_grid = |img: ImageGrid| ImageGrid {
            voxel_size: g.voxel_size.clone(),
            ..img
        };
        let a = ideal_sinogram(&on_grid(shepp_logan(&[48, 48]).unwrap().scaled(0.01)), &g).unwrap();
        let b = ideal_sinogram(
            &on_grid(crate::simulator::random_ellipse_phantom(&[48, 48], 5, 3).unwrap().scaled(0.02)),
            &g,
        )
        .unwrap();
        let k = 1.75f32;
        let combo = Sinogram {
            values: a.values.iter().zip(&b.values).map(|(x, y)| k * x + y).collect(),
            ..a.clone()
        };
        let fa = fbp_reconstruct(&a, Window::RamLak).unwrap();
        let fb = fbp_reconstruct(&b, Window::RamLak).unwrap();
        let fc = fbp_reconstruct(&combo, Window::RamLak).unwrap();
        let scale = fc.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..fc.len() {
            let want = k as f64 * fa.values[i] + fb.values[i];
            assert!((fc.values[i] - want).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn clean_shepp_logan_reconstructs_above_25_db() {
        let g = geometry(128, 3.25);
        let phantom = shepp_logan(&[128, 128]).unwrap();
        let truth = ImageGrid {
            voxel_size: g.voxel_size.clone(),
            ..phantom.scaled(0.03)
        };
        let sino = ideal_sinogram(&truth, &g).unwrap();
        let rec = fbp_reconstruct(&sino, Window::RamLak).unwrap();
        let p = psnr(&rec, &truth).unwrap();
        assert!(p >= 25.0, "clean FBP PSNR {p}");

        let profile = sample_detector_profile(&g, &CorruptionSpec::default(), 4).unwrap();
        let dirty = corrupt(&sino, &profile, 1e7, true, 5).unwrap();
        let rec_dirty = fbp_reconstruct(&dirty, Window::RamLak).unwrap();
        assert!(psnr(&rec_dirty, &truth).unwrap() < p);
    }

    #[test]
    fn centred_disc_is_radially_symmetric() {
        let n = 128;
        let g = geometry(n, 3.0);
        let c = 0.5 * (n as f64 - 1.0);
        let mut disc = ImageGrid::zeros_like(&g);
        for iy in 0..n {
            for ix in 0..n {
                let d = ((ix as f64 - c).powi(2) + (iy as f64 - c).powi(2)).sqrt();
                disc.values[ix + n * iy] = if d <= 40.0 { 0.02 } else { 0.0 };
            }
        }
        let rec = fbp_reconstruct(&ideal_sinogram(&disc, &g).unwrap(), Window::RamLak).unwrap();
        for radius in [10.0, 20.0, 30.0] {
            let sectors = 16;
            let mut means = Vec::new();
            for s in 0..sectors {
                let (mut sum, mut count) = (0.0, 0);
                for iy in 0..n {
                    for ix in 0..n {
                        let (dx, dy) = (ix as f64 - c, iy as f64 - c);
                        let d = (dx * dx + dy * dy).sqrt();
                        let angle = dy.atan2(dx).rem_euclid(2.0 * PI);
                        if (d - radius).abs() < 1.5 && (angle / (2.0 * PI) * sectors as f64) as usize == s {
                            sum += rec.values[ix + n * iy];
                            count += 1;
                        }
                    }
                }
                means.push(sum / count as f64);
            }
            let mean = means.iter().sum::<f64>() / sectors as f64;
            let sd = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / sectors as f64).sqrt();
            assert!(sd / mean <= 0.02, "radius {radius}: cv {}", sd / mean);
        }
    }

    #[test]
    fn rejects_cone_beam_and_partial_scans() {
        let cone = ScanGeometry {
            n_detectors: DetectorCount::Panel([4, 8]),
            ..ScanGeometry::cone3d_default()
        };
        let cone = ScanGeometry {
            grid_shape: vec![8, 8, 8],
            voxel_size: vec![1.0; 3],
            n_views: 4,
            ..cone
        };
        assert!(matches!(
            fbp_reconstruct(&Sinogram::zeros(&cone), Window::RamLak),
            Err(Error::Unsupported(_))
        ));
        let partial = ScanGeometry {
            view_range: [0.0, 180.0],
            ..geometry(16, 1.0)
        };
        assert!(matches!(
            fbp_reconstruct(&Sinogram::zeros(&partial), Window::RamLak),
            Err(Error::Unsupported(_))
        ));
    }
}
