//! Learnable per-detector response and mask variables, and the
//! differentiable measurement model built on them.

use crate::error::{Error, Result};
use crate::real::Real;

pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorVariables<T> {
    pub alpha_raw: Vec<T>,
    pub beta_raw: Vec<T>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDetectorParams<T> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> DetectorVariables<T> {
    /// Raw variables all set to 1.
    pub fn new(n_detectors: usize) -> Self {
        DetectorVariables {
            alpha_raw: vec![T::one(); n_detectors],
            beta_raw: vec![T::one(); n_detectors],
            epsilon: ALPHA_FLOOR,
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_raw.is_empty()
    }

    pub fn alpha(&self, s: usize) -> T {
        self.alpha_raw[s].max(T::of(self.epsilon))
    }

    pub fn beta(&self, s: usize) -> T {
        sigmoid(self.beta_raw[s])
    }

    pub fn effective(&self) -> EffectiveDetectorParams<T> {
        effective_params(self)
    }

    pub fn cast<U: Real>(&self) -> DetectorVariables<U> {
        DetectorVariables {
            alpha_raw: self.alpha_raw.iter().map(|v| U::of(v.as_f64())).collect(),
            beta_raw: self.beta_raw.iter().map(|v| U::of(v.as_f64())).collect(),
            epsilon: self.epsilon,
        }
    }
}

pub fn effective_params<T: Real>(vars: &DetectorVariables<T>) -> EffectiveDetectorParams<T> {
    EffectiveDetectorParams {
        alpha: (0..vars.len()).map(|s| vars.alpha(s)).collect(),
        beta: (0..vars.len()).map(|s| vars.beta(s)).collect(),
    }
}

/// `−ln α + Σ μ_k Δx`, summed in sample order.
fn bracket<T: Real>(mu_samples: &[T], step: T, alpha: T) -> T {
    let mut acc = -alpha.ln();
    for &m in mu_samples {
        acc += m * step;
    }
    acc
}

/// `ρ̂ = (−ln α + Σ μ_k Δx) · β`.
pub fn predict_measurement<T: Real>(mu_samples: &[T], step: T, alpha: T, beta: T) -> Result<T> {
    if mu_samples.is_empty() {
        return Err(Error::EmptyPath);
    }
    Ok(bracket(mu_samples, step, alpha) * beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGradients<T> {
    pub d_mu: Vec<T>,
    pub d_alpha_raw: T,
    pub d_beta_raw: T,
}

/// Gradients of `upstream · ρ̂` with respect to the samples and detector `s`'s
/// raw variables.
pub fn measurement_gradients<T: Real>(
    mu_samples: &[T],
    step: T,
    vars: &DetectorVariables<T>,
    s: usize,
    upstream: T,
) -> MeasurementGradients<T> {
    let alpha = vars.alpha(s);
    let beta = vars.beta(s);
    let d_alpha_raw = if vars.alpha_raw[s] < T::of(vars.epsilon) {
        T::zero()
    } else {
        -upstream * beta / alpha
    };
    MeasurementGradients {
        d_mu: vec![upstream * beta * step; mu_samples.len()],
        d_alpha_raw,
        d_beta_raw: upstream * bracket(mu_samples, step, alpha) * beta * (T::one() - beta),
    }
}
