//! Unsupervised ring-artifact reduction for fan-beam and cone-beam CT.
//!
//! The attenuation image is represented by a neural field (multiresolution
//! hash encoding or Fourier features followed by a small MLP). Each detector
//! element carries a learnable response factor and a soft validity mask.
//! Both are fitted jointly to a corrupted sinogram through a differentiable
//! ray-marching forward model, without any training data.
//!
//! Around that core the crate provides everything needed to validate it:
//! scanner geometry, phantoms and a corruption simulator, a fan-beam FBP
//! baseline, and PSNR/SSIM metrics.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod fbp;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod real;
pub mod simulator;
pub mod trainer;

pub use detector::{DetectorVariables, EffectiveDetectorParams};
pub use error::{Error, Result};
pub use field::{EncodingKind, FieldGradients, FieldParams, HashEncodingConfig};
pub use geometry::{Mode, Ray, SamplePath, ScanGeometry};
pub use metrics::EvalReport;
pub use real::Real;
pub use simulator::{DetectorProfile, ImageGrid, Sinogram};
pub use checkpoint::Checkpoint;
pub use trainer::{TrainConfig, TrainOutcome};
