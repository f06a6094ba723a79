//! Scanner geometry: circular-orbit fan-beam (2D) and cone-beam (3D) with a
//! flat, equidistant detector, plus ray generation and ray marching through
//! the reconstruction volume.
//!
//! Conventions: the rotation axis is `z` through the origin. At view angle
//! `θ` the source sits at `source_to_center · (cos θ, sin θ, 0)` and the
//! detector centre at `-center_to_detector · (cos θ, sin θ, 0)`. The detector
//! column axis is `(-sin θ, cos θ, 0)`, the row axis is `+z`. The
//! reconstruction volume is the axis-aligned box of `grid_shape · voxel_size`
//! centred on the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional margin added on each side of the volume box before mapping
/// coordinates into the unit cube.
pub const NORMALIZATION_PADDING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fan2d,
    Cone3d,
}

/// Detector count: a single line for fan-beam, `[rows, cols]` for cone-beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectorCount {
    Line(usize),
    Panel([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub mode: Mode,
    pub n_views: usize,
    /// Start and end of the angular range in degrees; views are equiangular
    /// over `[start, end)`.
    pub view_range: [f64; 2],
    pub n_detectors: DetectorCount,
    /// Detector pitch in mm (both axes for cone-beam).
    pub detector_spacing: f64,
    pub source_to_center: f64,
    pub center_to_detector: f64,
    /// Voxels per axis, `[nx, ny]` or `[nx, ny, nz]`.
    pub grid_shape: Vec<usize>,
    /// Voxel size in mm per axis.
    pub voxel_size: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub view: usize,
    pub detector: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    /// Sample positions in mm, ordered from source to detector.
    pub points: Vec<[f64; 3]>,
    /// Distance between consecutive samples in mm.
    pub step: f64,
    /// Same positions mapped into the unit cube of the padded volume box.
    /// Only the first `dim` components are meaningful.
    pub normalized: Vec<[f64; 3]>,
    pub dim: usize,
}

impl SamplePath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Validates a geometry description.
pub fn make_geometry(config: ScanGeometry) -> Result<ScanGeometry> {
    config.validate()?;
    Ok(config)
}

impl ScanGeometry {
    /// 2D fan-beam protocol used for the simulated slice datasets.
    pub fn fan2d_default() -> Self {
        ScanGeometry {
            mode: Mode::Fan2d,
            n_views: 360,
            view_range: [0.0, 360.0],
            n_detectors: DetectorCount::Line(500),
            detector_spacing: 2.0,
            source_to_center: 370.0,
            center_to_detector: 370.0,
            grid_shape: vec![256, 256],
            voxel_size: vec![1.0, 1.0],
        }
    }

    /// Desk-scale 2D instance: the default scanner with a 128² grid of
    /// 3.25 mm voxels, so the object spans most of the detector.
    pub fn fan2d_desk() -> Self {
        ScanGeometry {
            grid_shape: vec![128, 128],
            voxel_size: vec![3.25, 3.25],
            ..Self::fan2d_default()
        }
    }

    /// Small cone-beam instance: 64³ voxels of 4 mm, 90 views, 64×64 panel.
    pub fn cone3d_desk() -> Self {
        ScanGeometry {
            mode: Mode::Cone3d,
            n_views: 90,
            view_range: [0.0, 360.0],
            n_detectors: DetectorCount::Panel([64, 64]),
            detector_spacing: 6.0,
            source_to_center: 600.0,
            center_to_detector: 200.0,
            grid_shape: vec![64, 64, 64],
            voxel_size: vec![4.0, 4.0, 4.0],
        }
    }

    /// 3D cone-beam protocol used for the simulated volume dataset.
    pub fn cone3d_default() -> Self {
        ScanGeometry {
            mode: Mode::Cone3d,
            n_views: 360,
            view_range: [0.0, 360.0],
            n_detectors: DetectorCount::Panel([200, 300]),
            detector_spacing: 2.0,
            source_to_center: 300.0,
            center_to_detector: 300.0,
            grid_shape: vec![256, 256, 100],
            voxel_size: vec![1.0, 1.0, 1.0],
        }
    }

    /// 3D cone-beam micro-CT protocol (120 x 1008 panel).
    pub fn cone3d_micro_ct() -> Self {
        ScanGeometry {
            mode: Mode::Cone3d,
            n_views: 720,
            view_range: [0.0, 360.0],
            n_detectors: DetectorCount::Panel([120, 1008]),
            detector_spacing: 0.069,
            source_to_center: 92.602,
            center_to_detector: 65.946,
            grid_shape: vec![512, 512, 80],
            voxel_size: vec![0.06, 0.06, 0.06],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.source_to_center, "source_to_center")?;
        positive(self.center_to_detector, "center_to_detector")?;
        positive(self.detector_spacing, "detector_spacing")?;
        if self.n_views == 0 {
            return Err(Error::validation("n_views must be at least 1"));
        }
        let [start, end] = self.view_range;
        if !(start.is_finite() && end.is_finite() && end > start && end - start <= 360.0 + 1e-9) {
            return Err(Error::validation(format!(
                "view_range must satisfy start < end <= start + 360, got [{start}, {end}]"
            )));
        }
        let dim = self.dim();
        match (self.mode, self.n_detectors) {
            (Mode::Fan2d, DetectorCount::Line(n)) if n >= 1 => {}
            (Mode::Cone3d, DetectorCount::Panel([r, c])) if r >= 1 && c >= 1 => {}
            (mode, count) => {
                return Err(Error::validation(format!(
                    "detector count {count:?} is not valid for mode {mode:?}"
                )))
            }
        }
        if self.grid_shape.len() != dim || self.voxel_size.len() != dim {
            return Err(Error::validation(format!(
                "grid_shape and voxel_size need {dim} entries for {:?}",
                self.mode
            )));
        }
        if self.grid_shape.contains(&0) {
            return Err(Error::validation("grid_shape entries must be at least 1"));
        }
        for &v in &self.voxel_size {
            positive(v, "voxel_size")?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            Mode::Fan2d => 2,
            Mode::Cone3d => 3,
        }
    }

    /// `(rows, cols)` of the detector; rows is 1 for fan-beam.
    pub fn detector_panel(&self) -> (usize, usize) {
        match self.n_detectors {
            DetectorCount::Line(n) => (1, n),
            DetectorCount::Panel([r, c]) => (r, c),
        }
    }

    pub fn detector_count(&self) -> usize {
        let (r, c) = self.detector_panel();
        r * c
    }

    pub fn voxel_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// View angle in radians.
    pub fn view_angle(&self, view: usize) -> f64 {
        let [start, end] = self.view_range;
        (start + view as f64 * (end - start) / self.n_views as f64).to_radians()
    }

    /// Default marching step: half of the smallest voxel edge.
    pub fn default_step(&self) -> f64 {
        0.5 * self.voxel_size.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Half extent of the volume box per axis (z is 0 in 2D).
    pub fn half_extent(&self) -> [f64; 3] {
        let mut h = [0.0; 3];
        for (i, (&n, &v)) in self.grid_shape.iter().zip(&self.voxel_size).enumerate() {
            h[i] = 0.5 * n as f64 * v;
        }
        h
    }

    /// Maps a point in mm to the unit cube of the padded volume box.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.half_extent();
        let mut out = [0.0; 3];
        for i in 0..self.dim() {
            let half = h[i] * (1.0 + NORMALIZATION_PADDING);
            out[i] = ((p[i] + half) / (2.0 * half)).clamp(0.0, 1.0);
        }
        out
    }

    /// Centre of voxel `index` (per-axis indices) in mm.
    pub fn voxel_center(&self, index: &[usize]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for i in 0..self.dim() {
            p[i] = (index[i] as f64 + 0.5 - 0.5 * self.grid_shape[i] as f64) * self.voxel_size[i];
        }
        p
    }

    pub fn source_position(&self, view: usize) -> [f64; 3] {
        let (s, c) = self.view_angle(view).sin_cos();
        [self.source_to_center * c, self.source_to_center * s, 0.0]
    }

    /// Centre of a detector element in mm.
    pub fn detector_position(&self, view: usize, detector: usize) -> [f64; 3] {
        let (rows, cols) = self.detector_panel();
        let (row, col) = (detector / cols, detector % cols);
        let (s, c) = self.view_angle(view).sin_cos();
        let u = (col as f64 - 0.5 * (cols as f64 - 1.0)) * self.detector_spacing;
        let v = match self.mode {
            Mode::Fan2d => 0.0,
            Mode::Cone3d => (row as f64 - 0.5 * (rows as f64 - 1.0)) * self.detector_spacing,
        };
        [
            -self.center_to_detector * c - u * s,
            -self.center_to_detector * s + u * c,
            v,
        ]
    }

    /// Enumerates every voxel centre in storage order (x fastest).
    pub fn voxel_centers(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        let dim = self.dim();
        let shape = self.grid_shape.clone();
        (0..self.voxel_count()).map(move |lin| {
            let mut idx = [0usize; 3];
            let mut rem = lin;
            for i in 0..dim {
                idx[i] = rem % shape[i];
                rem /= shape[i];
            }
            self.voxel_center(&idx[..dim])
        })
    }
}

/// The X-ray from the source to the centre of `detector` at `view`.
pub fn ray_for(geometry: &ScanGeometry, view: usize, detector: usize) -> Result<Ray> {
    if view >= geometry.n_views {
        return Err(Error::OutOfRange {
            what: "view",
            index: view,
            len: geometry.n_views,
        });
    }
    let n_det = geometry.detector_count();
    if detector >= n_det {
        return Err(Error::OutOfRange {
            what: "detector",
            index: detector,
            len: n_det,
        });
    }
    let origin = geometry.source_position(view);
    let target = geometry.detector_position(view, detector);
    let d = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    Ok(Ray {
        origin,
        direction: [d[0] / norm, d[1] / norm, d[2] / norm],
        view,
        detector,
    })
}

/// Slab-method intersection of a ray with the box `[lo, hi]` over the first
/// `dim` axes. The entry parameter is clamped to 0 for interior origins.
pub fn intersect_box(
    origin: [f64; 3],
    direction: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    dim: usize,
) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..dim {
        if direction[i] == 0.0 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / direction[i];
        let (mut t0, mut t1) = ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    let t_near = t_near.max(0.0);
    (t_near < t_far).then_some((t_near, t_far))
}

/// Entry and exit parameters of `ray` against the reconstruction volume.
pub fn intersect_volume(ray: &Ray, geometry: &ScanGeometry) -> Option<(f64, f64)> {
    let h = geometry.half_extent();
    intersect_box(
        ray.origin,
        ray.direction,
        [-h[0], -h[1], -h[2]],
        h,
        geometry.dim(),
    )
}

/// Midpoint samples at `t_near + (k + 1/2) step` for every whole step that
/// fits inside the chord through the volume.
pub fn sample_path(ray: &Ray, geometry: &ScanGeometry, step: f64) -> Result<SamplePath> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::validation(format!("step must be positive, got {step}")));
    }
    let (t_near, t_far) = intersect_volume(ray, geometry).ok_or(Error::EmptyPath)?;
    // Only whole steps that fit inside the chord are sampled.
    let n = ((t_far - t_near) / step + 1e-9).floor() as usize;
    let mut points = Vec::with_capacity(n);
    let mut normalized = Vec::with_capacity(n);
    for k in 0..n {
        let t = t_near + (k as f64 + 0.5) * step;
        let p = [
            ray.origin[0] + t * ray.direction[0],
            ray.origin[1] + t * ray.direction[1],
            ray.origin[2] + t * ray.direction[2],
        ];
        normalized.push(geometry.normalize(p));
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyPath);
    }
    Ok(SamplePath {
        points,
        step,
        normalized,
        dim: geometry.dim(),
    })
}
