//! One-call simulation of a corrupted scan: phantom, ideal sinogram,
//! detector profile and corrupted measurements, all derived from one seed.

use serde::{Deserialize, Serialize};

use super::{
    corrupt, ideal_sinogram, random_ellipse_phantom, sample_detector_profile, shepp_logan, CorruptionSpec,
    DetectorProfile, ImageGrid, Sinogram,
};
use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    #[default]
    SheppLogan,
    Ellipses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub phantom: PhantomKind,
    /// Attenuation in 1/mm of a unit phantom intensity.
    pub mu_scale: f64,
    pub n_ellipses: usize,
    pub corruption: CorruptionSpec,
    pub photons: f64,
    pub noise: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            phantom: PhantomKind::SheppLogan,
            mu_scale: 0.03,
            n_ellipses: 10,
            corruption: CorruptionSpec::default(),
            photons: 1e7,
            noise: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub phantom: ImageGrid,
    pub clean: Sinogram,
    pub corrupted: Sinogram,
    pub profile: DetectorProfile,
}

/// Phantom on the geometry's grid, scaled by `mu_scale`.
pub fn make_phantom(geometry: &ScanGeometry, config: &SimulationConfig) -> Result<ImageGrid> {
    if !(config.mu_scale > 0.0 && config.mu_scale.is_finite()) {
        return Err(Error::validation("mu_scale must be positive"));
    }
    let unit = match config.phantom {
        PhantomKind::SheppLogan => shepp_logan(&geometry.grid_shape)?,
        PhantomKind::Ellipses => random_ellipse_phantom(&geometry.grid_shape, config.n_ellipses, config.seed)?,
    };
    ImageGrid::new(unit.shape, geometry.voxel_size.clone(), unit.values).map(|img| img.scaled(config.mu_scale))
}

pub fn simulate_scan(geometry: &ScanGeometry, config: &SimulationConfig) -> Result<SimulatedScan> {
    geometry.validate()?;
    let phantom = make_phantom(geometry, config)?;
    let clean = ideal_sinogram(&phantom, geometry)?;
    let profile = sample_detector_profile(geometry, &config.corruption, config.seed)?;
    let corrupted = corrupt(
        &clean,
        &profile,
        config.photons,
        config.noise,
        config.seed.wrapping_add(0x006e_6f69_7365),
    )?;
    Ok(SimulatedScan {
        phantom,
        clean,
        corrupted,
        profile,
    })
}
