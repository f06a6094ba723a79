//! Run configuration: a strict TOML file whose values can be overridden by
//! command-line flags (flags win).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use riner_core::geometry::DetectorCount;
use riner_core::simulator::SimulationConfig;
use riner_core::{EncodingKind, Mode, ScanGeometry, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Fan2dDefault,
    #[default]
    Fan2dDesk,
    Cone3dDefault,
    Cone3dDesk,
    Cone3dMicroCt,
}

/// A preset scanner plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub preset: Preset,
    pub mode: Option<Mode>,
    pub n_views: Option<usize>,
    pub view_range: Option<[f64; 2]>,
    pub n_detectors: Option<DetectorCount>,
    pub detector_spacing: Option<f64>,
    pub source_to_center: Option<f64>,
    pub center_to_detector: Option<f64>,
    pub grid_shape: Option<Vec<usize>>,
    pub voxel_size: Option<Vec<f64>>,
}

impl GeometrySection {
    pub fn resolve(&self) -> anyhow::Result<ScanGeometry> {
        let mut g = match self.preset {
            Preset::Fan2dDefault => ScanGeometry::fan2d_default(),
            Preset::Fan2dDesk => ScanGeometry::fan2d_desk(),
            Preset::Cone3dDefault => ScanGeometry::cone3d_default(),
            Preset::Cone3dDesk => ScanGeometry::cone3d_desk(),
            Preset::Cone3dMicroCt => ScanGeometry::cone3d_micro_ct(),
        };
        if let Some(v) = self.mode {
            g.mode = v;
        }
        if let Some(v) = self.n_views {
            g.n_views = v;
        }
        if let Some(v) = self.view_range {
            g.view_range = v;
        }
        if let Some(v) = self.n_detectors {
            g.n_detectors = v;
        }
        if let Some(v) = self.detector_spacing {
            g.detector_spacing = v;
        }
        if let Some(v) = self.source_to_center {
            g.source_to_center = v;
        }
        if let Some(v) = self.center_to_detector {
            g.center_to_detector = v;
        }
        if let Some(v) = &self.grid_shape {
            g.grid_shape = v.clone();
        }
        if let Some(v) = &self.voxel_size {
            g.voxel_size = v.clone();
        }
        g.validate().context("invalid geometry")?;
        Ok(g)
    }

    /// Section that reproduces `g` exactly.
    pub fn pinned(preset: Preset, g: &ScanGeometry) -> Self {
        GeometrySection {
            preset,
            mode: Some(g.mode),
            n_views: Some(g.n_views),
            view_range: Some(g.view_range),
            n_detectors: Some(g.n_detectors),
            detector_spacing: Some(g.detector_spacing),
            source_to_center: Some(g.source_to_center),
            center_to_detector: Some(g.center_to_detector),
            grid_shape: Some(g.grid_shape.clone()),
            voxel_size: Some(g.voxel_size.clone()),
        }
    }
}

/// Ablation switches applied on top of the training section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub disable_alpha: bool,
    pub disable_beta: bool,
    pub lambda: Option<f64>,
    pub encoding: Option<EncodingKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Sinogram to reconstruct.
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Reference image for preview windowing and evaluation.
    pub reference: Option<PathBuf>,
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub simulation: SimulationConfig,
    pub training: TrainConfig,
    pub ablation: AblationSection,
    pub paths: PathsSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub disable_alpha: bool,
    pub disable_beta: bool,
    pub lambda: Option<f64>,
    pub encoding: Option<EncodingKind>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Applies flags, then folds the ablation section into the training
    /// section so that `training` alone describes the run.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(seed) = o.seed {
            self.simulation.seed = seed;
            self.training.seed = seed;
        }
        if o.output_dir.is_some() {
            self.paths.output_dir = o.output_dir.clone();
        }
        self.ablation.disable_alpha |= o.disable_alpha;
        self.ablation.disable_beta |= o.disable_beta;
        if o.lambda.is_some() {
            self.ablation.lambda = o.lambda;
        }
        if o.encoding.is_some() {
            self.ablation.encoding = o.encoding;
        }
        self.training.disable_alpha |= self.ablation.disable_alpha;
        self.training.disable_beta |= self.ablation.disable_beta;
        if let Some(l) = self.ablation.lambda {
            self.training.lambda = l;
        }
        if let Some(e) = self.ablation.encoding {
            self.training.field.encoding = e;
        }
        let g = self.geometry.resolve()?;
        self.geometry = GeometrySection::pinned(self.geometry.preset, &g);
        self.training.validate().context("invalid training section")?;
        if !(self.simulation.photons >= 1.0) {
            bail!("simulation.photons must be at least 1");
        }
        Ok(self)
    }

    pub fn output_dir(&self) -> anyhow::Result<&Path> {
        match &self.paths.output_dir {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --output-dir or set paths.output_dir"),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
