use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageGrid;
use crate::error::{Error, Result};

/// Ellipse (2D) or ellipsoid (3D) in phantom coordinates `[-1, 1]^d`,
/// rotated by `phi_deg` about the z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub axes: [f64; 3],
    pub center: [f64; 3],
    pub phi_deg: f64,
}

impl Ellipse {
    const fn new(intensity: f64, axes: [f64; 3], center: [f64; 3], phi_deg: f64) -> Self {
        Ellipse {
            intensity,
            axes,
            center,
            phi_deg,
        }
    }

    pub fn contains(&self, p: [f64; 3], dim: usize) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let mut r = (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2);
        if dim == 3 {
            r += ((p[2] - self.center[2]) / self.axes[2]).powi(2);
        }
        r <= 1.0
    }
}

/// Modified (high-contrast) Shepp-Logan ellipses.
pub const SHEPP_LOGAN_2D: [Ellipse; 10] = [
    Ellipse::new(1.0, [0.69, 0.92, 1.0], [0.0, 0.0, 0.0], 0.0),
    Ellipse::new(-0.8, [0.6624, 0.874, 1.0], [0.0, -0.0184, 0.0], 0.0),
    Ellipse::new(-0.2, [0.11, 0.31, 1.0], [0.22, 0.0, 0.0], -18.0),
    Ellipse::new(-0.2, [0.16, 0.41, 1.0], [-0.22, 0.0, 0.0], 18.0),
    Ellipse::new(0.1, [0.21, 0.25, 1.0], [0.0, 0.35, 0.0], 0.0),
    Ellipse::new(0.1, [0.046, 0.046, 1.0], [0.0, 0.1, 0.0], 0.0),
    Ellipse::new(0.1, [0.046, 0.046, 1.0], [0.0, -0.1, 0.0], 0.0),
    Ellipse::new(0.1, [0.046, 0.023, 1.0], [-0.08, -0.605, 0.0], 0.0),
    Ellipse::new(0.1, [0.023, 0.023, 1.0], [0.0, -0.606, 0.0], 0.0),
    Ellipse::new(0.1, [0.023, 0.046, 1.0], [0.06, -0.605, 0.0], 0.0),
];

/// Modified 3D Shepp-Logan ellipsoids (in-plane rotation only).
pub const SHEPP_LOGAN_3D: [Ellipse; 10] = [
    Ellipse::new(1.0, [0.69, 0.92, 0.81], [0.0, 0.0, 0.0], 0.0),
    Ellipse::new(-0.8, [0.6624, 0.874, 0.78], [0.0, -0.0184, 0.0], 0.0),
    Ellipse::new(-0.2, [0.11, 0.31, 0.22], [0.22, 0.0, 0.0], -18.0),
    Ellipse::new(-0.2, [0.16, 0.41, 0.28], [-0.22, 0.0, 0.0], 18.0),
    Ellipse::new(0.1, [0.21, 0.25, 0.41], [0.0, 0.35, -0.15], 0.0),
    Ellipse::new(0.1, [0.046, 0.046, 0.05], [0.0, 0.1, 0.25], 0.0),
    Ellipse::new(0.1, [0.046, 0.046, 0.05], [0.0, -0.1, 0.25], 0.0),
    Ellipse::new(0.1, [0.046, 0.023, 0.05], [-0.08, -0.605, 0.0], 0.0),
    Ellipse::new(0.1, [0.023, 0.023, 0.02], [0.0, -0.606, 0.0], 0.0),
    Ellipse::new(0.1, [0.023, 0.046, 0.02], [0.06, -0.605, 0.0], 0.0),
];

/// Continuous Shepp-Logan value at phantom coordinates, clamped to `[0, 1]`.
pub fn shepp_logan_value(p: [f64; 3], dim: usize) -> f64 {
    let table: &[Ellipse] = if dim == 3 { &SHEPP_LOGAN_3D } else { &SHEPP_LOGAN_2D };
    sum_ellipses(table, p, dim)
}

fn sum_ellipses(table: &[Ellipse], p: [f64; 3], dim: usize) -> f64 {
    table
        .iter()
        .filter(|e| e.contains(p, dim))
        .map(|e| e.intensity)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Phantom coordinates of voxel `lin` (centres mapped into `[-1, 1]^d`).
pub(crate) fn phantom_coordinates(shape: &[usize], lin: usize) -> [f64; 3] {
    let mut p = [0.0; 3];
    let mut rem = lin;
    for (i, &n) in shape.iter().enumerate() {
        let idx = rem % n;
        rem /= n;
        p[i] = (idx as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    }
    p
}

fn rasterize(shape: &[usize], f: impl Fn([f64; 3]) -> f64) -> ImageGrid {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|lin| f(phantom_coordinates(shape, lin))).collect();
    ImageGrid {
        shape: shape.to_vec(),
        voxel_size: vec![1.0; shape.len()],
        values,
    }
}

fn check_shape(shape: &[usize], min: usize) -> Result<()> {
    if !(shape.len() == 2 || shape.len() == 3) || shape.iter().any(|&n| n < min) {
        return Err(Error::validation(format!(
            "phantom shape {shape:?} must have 2 or 3 axes of at least {min} voxels"
        )));
    }
    Ok(())
}

/// Shepp-Logan phantom with unit voxels, values in `[0, 1]`.
pub fn shepp_logan(shape: &[usize]) -> Result<ImageGrid> {
    check_shape(shape, 16)?;
    let dim = shape.len();
    Ok(rasterize(shape, |p| shepp_logan_value(p, dim)))
}

/// Sum of `n_ellipses` random ellipses (ellipsoids in 3D) inside the unit
/// ball, clamped to `[0, 1]`. Deterministic for a given seed.
pub fn random_ellipse_phantom(shape: &[usize], n_ellipses: usize, seed: u64) -> Result<ImageGrid> {
    check_shape(shape, 2)?;
    if n_ellipses == 0 {
        return Err(Error::validation("n_ellipses must be at least 1"));
    }
    let dim = shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses: Vec<Ellipse> = (0..n_ellipses)
        .map(|_| {
            let mut axes = [1.0; 3];
            for a in axes.iter_mut().take(dim) {
                *a = rng.random_range(0.08..0.4);
            }
            let reach = axes[..dim].iter().cloned().fold(0.0, f64::max);
            let max_r = (0.9 - reach).max(0.0);
            let mut center = [0.0; 3];
            loop {
                for c in center.iter_mut().take(dim) {
                    *c = rng.random_range(-max_r..=max_r);
                }
                if center.iter().map(|c| c * c).sum::<f64>() <= max_r * max_r {
                    break;
                }
            }
            Ellipse {
                intensity: rng.random_range(0.2..1.0),
                axes,
                center,
                phi_deg: rng.random_range(0.0..180.0),
            }
        })
        .collect();
    Ok(rasterize(shape, |p| sum_ellipses(&ellipses, p, dim)))
}
