//! Fully connected layers with ReLU between them and a linear head,
//! evaluated over whole batches with GEMM.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// Layer widths `[in, h1, ..., out]`; weights uniform with fan-in scaling
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::validation(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weight: (0..w[0] * w[1])
                        .map(|_| T::of(rng.random_range(-bound..=bound)))
                        .collect(),
                    bias: vec![T::zero(); w[1]],
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads<T>> {
        self.layers
            .iter()
            .map(|l| LayerGrads {
                weight: vec![T::zero(); l.weight.len()],
                bias: vec![T::zero(); l.bias.len()],
            })
            .collect()
    }

    /// Runs `n` rows of `input` through the network. Returns the final
    /// output and the post-activation of every hidden layer.
    pub fn forward_batch(&self, input: &[T], n: usize) -> (Vec<T>, Vec<Vec<T>>) {
        let mut hidden = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut current: Option<Vec<T>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let src: &[T] = current.as_deref().unwrap_or(input);
            let mut z = vec![T::zero(); n * layer.outputs];
            for row in z.chunks_exact_mut(layer.outputs) {
                row.copy_from_slice(&layer.bias);
            }
            T::gemm(
                n,
                layer.inputs,
                layer.outputs,
                T::one(),
                src,
                (layer.inputs as isize, 1),
                &layer.weight,
                (1, layer.inputs as isize),
                T::one(),
                &mut z,
                (layer.outputs as isize, 1),
            );
            let last = i + 1 == self.layers.len();
            if !last {
                z.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero()
                    }
                });
            }
            if let Some(prev) = current.replace(z) {
                hidden.push(prev);
            }
        }
        (current.unwrap_or_default(), hidden)
    }

    /// Accumulates parameter gradients for the cotangent `upstream` (`n ×
    /// outputs`). Returns the gradient with respect to `input` when asked.
    pub fn backward_batch(
        &self,
        input: &[T],
        hidden: &[Vec<T>],
        upstream: &[T],
        n: usize,
        grads: &mut [LayerGrads<T>],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let mut dz = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let src: &[T] = if i == 0 { input } else { &hidden[i - 1] };
            let g = &mut grads[i];
            T::gemm(
                layer.outputs,
                n,
                layer.inputs,
                T::one(),
                &dz,
                (1, layer.outputs as isize),
                src,
                (layer.inputs as isize, 1),
                T::one(),
                &mut g.weight,
                (layer.inputs as isize, 1),
            );
            for row in dz.chunks_exact(layer.outputs) {
                for (b, &d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if i == 0 && !want_input_grad {
                return None;
            }
            let mut dsrc = vec![T::zero(); n * layer.inputs];
            T::gemm(
                n,
                layer.outputs,
                layer.inputs,
                T::one(),
                &dz,
                (layer.outputs as isize, 1),
                &layer.weight,
                (layer.inputs as isize, 1),
                T::zero(),
                &mut dsrc,
                (layer.inputs as isize, 1),
            );
            if i == 0 {
                return Some(dsrc);
            }
            for (d, &h) in dsrc.iter_mut().zip(src) {
                if h <= T::zero() {
                    *d = T::zero();
                }
            }
            dz = dsrc;
        }
        None
    }
}
