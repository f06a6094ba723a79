//! Binary checkpoints of the field weights and detector variables.
//!
//! Layout: magic, version byte, iteration, encoding header and tables, MLP
//! layers, detector variables, CRC-32. Weights are stored as little-endian
//! `f32`, so a 32-bit model round-trips bit-exactly.

use std::fs;
use std::path::Path;

use crate::detector::DetectorVariables;
use crate::error::{Error, Result};
use crate::field::{Dense, Encoding, FieldParams, FourierFeatures, HashEncodingConfig, HashGrid, Mlp};
use crate::io::{Reader, Writer, FORMAT_VERSION};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RINRCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed training iterations.
    pub iteration: usize,
    pub field: FieldParams<f32>,
    pub detectors: DetectorVariables<f32>,
}

fn f32s<T: Real>(v: &[T]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|x| x.as_f64() as f32)
}

pub fn encode_checkpoint<T: Real>(
    iteration: usize,
    field: &FieldParams<T>,
    detectors: &DetectorVariables<T>,
) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u8(FORMAT_VERSION);
    w.u64(iteration as u64);
    w.u8(field.dim() as u8);
    match &field.encoding {
        Encoding::Hash(g) => {
            w.u8(0);
            w.u32(g.config.levels)?;
            w.u32(g.config.table_size)?;
            w.u32(g.config.features_per_entry)?;
            w.u32(g.config.base_resolution)?;
            w.f64(g.config.growth_factor);
            w.f32s(f32s(&g.tables));
        }
        Encoding::Fourier(f) => {
            w.u8(1);
            w.u32(f.n_frequencies)?;
            w.f64(f.scale);
            w.u64(f.seed);
            w.f32s(f32s(&f.matrix));
        }
    }
    w.u32(field.mlp.layers.len())?;
    for layer in &field.mlp.layers {
        w.u32(layer.inputs)?;
        w.u32(layer.outputs)?;
        w.f32s(f32s(&layer.weight));
        w.f32s(f32s(&layer.bias));
    }
    w.u32(detectors.len())?;
    w.f64(detectors.epsilon);
    w.f32s(f32s(&detectors.alpha_raw));
    w.f32s(f32s(&detectors.beta_raw));
    Ok(w.finish())
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(data, CHECKPOINT_MAGIC, "checkpoint")?;
    let iteration = r.u64()? as usize;
    let dim = r.u8()? as usize;
    if !(dim == 2 || dim == 3) {
        return Err(Error::Format(format!("checkpoint dimension {dim}")));
    }
    let encoding = match r.u8()? {
        0 => {
            let config = HashEncodingConfig {
                levels: r.u32()?,
                table_size: r.u32()?,
                features_per_entry: r.u32()?,
                base_resolution: r.u32()?,
                growth_factor: r.f64()?,
            };
            config.validate()?;
            let tables = r.f32s(config.levels * config.table_size * config.features_per_entry)?;
            Encoding::Hash(HashGrid::with_tables(dim, config, tables))
        }
        1 => {
            let n_frequencies = r.u32()?;
            let scale = r.f64()?;
            let seed = r.u64()?;
            let matrix = r.f32s(n_frequencies * dim)?;
            Encoding::Fourier(FourierFeatures {
                dim,
                n_frequencies,
                scale,
                seed,
                matrix,
            })
        }
        k => return Err(Error::Format(format!("unknown encoding tag {k}"))),
    };
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    let mut expected = encoding.output_dim();
    for _ in 0..n_layers {
        let inputs = r.u32()?;
        let outputs = r.u32()?;
        if inputs != expected {
            return Err(Error::Format(format!("layer expects {inputs} inputs, previous gives {expected}")));
        }
        expected = outputs;
        let weight = r.f32s(inputs * outputs)?;
        let bias = r.f32s(outputs)?;
        layers.push(Dense {
            inputs,
            outputs,
            weight,
            bias,
        });
    }
    if layers.is_empty() || expected != 1 {
        return Err(Error::Format("MLP must end in a single output".into()));
    }
    let n_det = r.u32()?;
    let epsilon = r.f64()?;
    let alpha_raw = r.f32s(n_det)?;
    let beta_raw = r.f32s(n_det)?;
    r.finish()?;
    let field = FieldParams {
        encoding,
        mlp: Mlp { layers },
    };
    field.check_finite()?;
    Ok(Checkpoint {
        iteration,
        field,
        detectors: DetectorVariables {
            alpha_raw,
            beta_raw,
            epsilon,
        },
    })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    iteration: usize,
    field: &FieldParams<T>,
    detectors: &DetectorVariables<T>,
) -> Result<()> {
    fs::write(path, encode_checkpoint(iteration, field, detectors)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
