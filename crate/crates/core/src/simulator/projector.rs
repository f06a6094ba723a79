use super::{ImageGrid, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{intersect_volume, ray_for, sample_path, SamplePath, ScanGeometry};

/// Riemann sum `Σ μ(x_k) Δx` along the path, in path order.
pub fn line_integral(image: &ImageGrid, path: &SamplePath) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let mut acc = 0.0;
    for &p in &path.points {
        acc += image.sample(p) * path.step;
    }
    Ok(acc)
}

/// Noise-free log measurements of `image` for every (view, detector) ray.
/// Rays that miss the volume (or are shorter than one step) integrate to zero.
pub fn ideal_sinogram(image: &ImageGrid, geometry: &ScanGeometry) -> Result<Sinogram> {
    geometry.validate()?;
    if !image.matches(geometry) {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} @ {:?} mm vs geometry grid {:?} @ {:?} mm",
            image.shape, image.voxel_size, geometry.grid_shape, geometry.voxel_size
        )));
    }
    let step = geometry.default_step();
    let mut sino = Sinogram::zeros(geometry);
    let n_det = geometry.detector_count();
    for view in 0..geometry.n_views {
        for det in 0..n_det {
            let ray = ray_for(geometry, view, det)?;
            if intersect_volume(&ray, geometry).is_none() {
                continue;
            }
            let value = match sample_path(&ray, geometry, step) {
                Ok(path) => line_integral(image, &path)?,
                Err(Error::EmptyPath) => 0.0,
                Err(e) => return Err(e),
            };
            sino.values[view * n_det + det] = value as f32;
        }
    }
    Ok(sino)
}
