//! Coordinate network `f(x) -> μ`: an encoding (hash grid or Fourier
//! features) followed by a small MLP, with batched reverse mode.

pub mod fourier;
pub mod hash;
pub mod mlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use fourier::{fourier_encode, FourierFeatures};
pub use hash::{hash_encode, HashEncodingConfig, HashGrid, HashTrace};
pub use mlp::{Dense, LayerGrads, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    #[default]
    Hash,
    Fourier,
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(EncodingKind::Hash),
            "fourier" => Ok(EncodingKind::Fourier),
            other => Err(Error::validation(format!("unknown encoding '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: EncodingKind,
    pub hash: HashEncodingConfig,
    pub hidden_width: usize,
    pub fourier_frequencies: usize,
    pub fourier_scale: f64,
    pub fourier_width: usize,
    /// Number of linear layers after the Fourier features.
    pub fourier_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: EncodingKind::Hash,
            hash: HashEncodingConfig::default(),
            hidden_width: 64,
            fourier_frequencies: 128,
            fourier_scale: 10.0,
            fourier_width: 128,
            fourier_layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding<T> {
    Hash(HashGrid<T>),
    Fourier(FourierFeatures<T>),
}

impl<T: Real> Encoding<T> {
    pub fn output_dim(&self) -> usize {
        match self {
            Encoding::Hash(g) => g.output_dim(),
            Encoding::Fourier(f) => f.output_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoding::Hash(g) => g.dim,
            Encoding::Fourier(f) => f.dim,
        }
    }

    pub fn kind(&self) -> EncodingKind {
        match self {
            Encoding::Hash(_) => EncodingKind::Hash,
            Encoding::Fourier(_) => EncodingKind::Fourier,
        }
    }
}

/// All learnable weights of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub encoding: Encoding<T>,
    pub mlp: Mlp<T>,
}

/// Accumulated loss gradients, laid out like [`FieldParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients<T> {
    /// Empty for the Fourier encoding, whose matrix is frozen.
    pub tables: Vec<T>,
    pub layers: Vec<LayerGrads<T>>,
}

/// Activations cached by a forward pass over `n` points.
#[derive(Debug, Clone)]
pub struct FieldTrace<T> {
    pub n: usize,
    encoded: Vec<T>,
    hash: Option<HashTrace<T>>,
    hidden: Vec<Vec<T>>,
}

impl<T: Real> FieldTrace<T> {
    /// Which hidden units were active, layer by layer.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden.iter().flatten().map(|&h| h > T::zero())
    }
}

/// Factor on the initial weights of the Fourier MLP's output layer.
pub const FOURIER_HEAD_SCALE: f64 = 1e-3;

impl<T: Real> FieldParams<T> {
    pub fn new(dim: usize, config: &FieldConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match config.encoding {
            EncodingKind::Hash => {
                if config.hidden_width == 0 {
                    return Err(Error::validation("hidden_width must be positive"));
                }
                let grid = HashGrid::new(dim, config.hash.clone(), &mut rng)?;
                let mlp = Mlp::new(&[grid.output_dim(), config.hidden_width, 1], &mut rng)?;
                Ok(FieldParams {
                    encoding: Encoding::Hash(grid),
                    mlp,
                })
            }
            EncodingKind::Fourier => {
                if config.fourier_layers < 2 {
                    return Err(Error::validation("fourier MLP needs at least 2 layers"));
                }
                let features = FourierFeatures::new(
                    dim,
                    config.fourier_frequencies,
                    config.fourier_scale,
                    seed ^ 0x5eed_f00d,
                )?;
                let mut widths = vec![features.output_dim()];
                widths.extend(std::iter::repeat_n(config.fourier_width, config.fourier_layers - 1));
                widths.push(1);
                let mut mlp = Mlp::new(&widths, &mut rng)?;
                // Start near zero attenuation, as the hash field does.
                if let Some(head) = mlp.layers.last_mut() {
                    head.weight.iter_mut().for_each(|w| *w = *w * T::of(FOURIER_HEAD_SCALE));
                }
                Ok(FieldParams {
                    encoding: Encoding::Fourier(features),
                    mlp,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.encoding.dim()
    }

    pub fn kind(&self) -> EncodingKind {
        self.encoding.kind()
    }

    pub fn zero_grads(&self) -> FieldGradients<T> {
        FieldGradients {
            tables: match &self.encoding {
                Encoding::Hash(g) => vec![T::zero(); g.tables.len()],
                Encoding::Fourier(_) => Vec::new(),
            },
            layers: self.mlp.zero_grads(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.groups().iter().map(|(_, v)| v.len()).sum()
    }

    /// Learnable parameter groups with stable names. The order matches
    /// [`FieldGradients::groups`].
    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        if let Encoding::Hash(g) = &self.encoding {
            out.push(("hash_tables".into(), &g.tables));
        }
        for (i, l) in self.mlp.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), &l.weight));
            out.push((format!("mlp.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        if let Encoding::Hash(g) = &mut self.encoding {
            out.push(("hash_tables".into(), &mut g.tables));
        }
        for (i, l) in self.mlp.layers.iter_mut().enumerate() {
            out.push((format!("mlp.{i}.weight"), &mut l.weight));
            out.push((format!("mlp.{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, values) in self.groups() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    group: name,
                    iteration: None,
                });
            }
        }
        Ok(())
    }

    /// Evaluates the field at `n` normalized points (`points[p * dim + i]`).
    pub fn forward_batch(&self, points: &[T]) -> Result<(Vec<T>, FieldTrace<T>)> {
        let dim = self.dim();
        if !points.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates is not a multiple of dimension {dim}",
                points.len()
            )));
        }
        self.check_finite()?;
        let n = points.len() / dim;
        let (encoded, hash) = match &self.encoding {
            Encoding::Hash(g) => {
                let (e, t) = g.encode_batch(points)?;
                (e, Some(t))
            }
            Encoding::Fourier(f) => (f.encode_batch(points)?, None),
        };
        let (mu, hidden) = self.mlp.forward_batch(&encoded, n);
        Ok((
            mu,
            FieldTrace {
                n,
                encoded,
                hash,
                hidden,
            },
        ))
    }

    /// Accumulates `upstream[p] · ∂μ_p/∂θ` into `grads`.
    pub fn backward_batch(
        &self,
        trace: &FieldTrace<T>,
        upstream: &[T],
        grads: &mut FieldGradients<T>,
    ) -> Result<()> {
        if upstream.len() != trace.n
            || grads.layers.len() != self.mlp.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.mlp.layers)
                .any(|(g, l)| g.weight.len() != l.weight.len() || g.bias.len() != l.bias.len())
        {
            return Err(Error::ShapeMismatch("field trace / gradient buffers".into()));
        }
        match &self.encoding {
            Encoding::Hash(g) => {
                let hash = trace
                    .hash
                    .as_ref()
                    .ok_or_else(|| Error::ShapeMismatch("trace lacks hash record".into()))?;
                let d_enc = self
                    .mlp
                    .backward_batch(&trace.encoded, &trace.hidden, upstream, trace.n, &mut grads.layers, true)
                    .unwrap_or_default();
                g.backward(hash, &d_enc, &mut grads.tables)
            }
            Encoding::Fourier(_) => {
                self.mlp
                    .backward_batch(&trace.encoded, &trace.hidden, upstream, trace.n, &mut grads.layers, false);
                Ok(())
            }
        }
    }

    /// Converts every weight to another float type.
    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let encoding = match &self.encoding {
            Encoding::Hash(g) => Encoding::Hash(HashGrid::with_tables(g.dim, g.config.clone(), conv(&g.tables))),
            Encoding::Fourier(f) => Encoding::Fourier(FourierFeatures {
                dim: f.dim,
                n_frequencies: f.n_frequencies,
                scale: f.scale,
                seed: f.seed,
                matrix: conv(&f.matrix),
            }),
        };
        let mlp = Mlp {
            layers: self
                .mlp
                .layers
                .iter()
                .map(|l| Dense {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        };
        FieldParams { encoding, mlp }
    }
}

impl<T: Real> FieldGradients<T> {
    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        if !self.tables.is_empty() {
            out.push(("hash_tables".into(), &self.tables));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), &l.weight));
            out.push((format!("mlp.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        if !self.tables.is_empty() {
            out.push(("hash_tables".into(), &mut self.tables));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("mlp.{i}.weight"), &mut l.weight));
            out.push((format!("mlp.{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn zero(&mut self) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Evaluates the field at a single normalized coordinate.
pub fn field_forward<T: Real>(x: &[T], params: &FieldParams<T>) -> Result<(T, FieldTrace<T>)> {
    if x.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "coordinate has {} components, field expects {}",
            x.len(),
            params.dim()
        )));
    }
    let (mu, trace) = params.forward_batch(x)?;
    Ok((mu[0], trace))
}

pub fn field_backward<T: Real>(
    params: &FieldParams<T>,
    trace: &FieldTrace<T>,
    upstream: T,
    grads: &mut FieldGradients<T>,
) -> Result<()> {
    params.backward_batch(trace, &[upstream], grads)
}
