//! Image quality and detector-recovery metrics.

use std::fmt::Write as _;

use crate::detector::DetectorVariables;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::simulator::{DetectorProfile, ImageGrid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const BETA_THRESHOLD: f64 = 0.5;

fn check_shapes(test: &ImageGrid, reference: &ImageGrid) -> Result<()> {
    if test.shape != reference.shape || test.values.len() != reference.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "test {:?} vs reference {:?}",
            test.shape, reference.shape
        )));
    }
    Ok(())
}

/// Dynamic range used by both metrics: `max − min` of the reference.
pub fn data_range(reference: &ImageGrid) -> f64 {
    reference.max() - reference.min()
}

/// Peak signal-to-noise ratio in dB; `+∞` when the images are identical.
pub fn psnr(test: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    check_shapes(test, reference)?;
    let range = data_range(reference);
    if !(range > 0.0) {
        return Err(Error::validation("PSNR needs a non-constant reference"));
    }
    let mse = test
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / test.values.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter over the valid region (no padding).
fn filter_valid(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_slice(a: &[f64], b: &[f64], w: usize, h: usize, range: f64) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let kernel = gaussian_window();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, w, h, &kernel);
    let mu_b = filter_valid(b, w, h, &kernel);
    let aa = filter_valid(&prod(a, a), w, h, &kernel);
    let bb = filter_valid(&prod(b, b), w, h, &kernel);
    let ab = filter_valid(&prod(a, b), w, h, &kernel);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean structural similarity (Gaussian window, valid region). Volumes are
/// scored slice by slice along z and averaged.
pub fn ssim(test: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    check_shapes(test, reference)?;
    let range = data_range(reference);
    if !(range > 0.0) {
        return Err(Error::validation("SSIM needs a non-constant reference"));
    }
    let (w, h) = (reference.shape[0], *reference.shape.get(1).unwrap_or(&1));
    let slices = reference.shape.get(2).copied().unwrap_or(1);
    let plane = w * h;
    let mut total = 0.0;
    for z in 0..slices {
        let s = z * plane..(z + 1) * plane;
        total += ssim_slice(&test.values[s.clone()], &reference.values[s], w, h, range)?;
    }
    Ok((total / slices as f64).clamp(-1.0, 1.0))
}

/// `(α MAE over healthy detectors, fraction of detectors classified
/// correctly by β < 0.5 ⇔ defective)`.
pub fn detector_recovery<T: Real>(learned: &DetectorVariables<T>, truth: &DetectorProfile) -> Result<(f64, f64)> {
    let eff = learned.effective();
    let alpha: Vec<f64> = eff.alpha.iter().map(|a| a.as_f64()).collect();
    let beta: Vec<f64> = eff.beta.iter().map(|b| b.as_f64()).collect();
    recovery_from_effective(&alpha, &beta, truth)
}

/// [`detector_recovery`] on effective `α` and `β` values.
pub fn recovery_from_effective(alpha: &[f64], beta: &[f64], truth: &DetectorProfile) -> Result<(f64, f64)> {
    if alpha.len() != truth.len() || beta.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} learned detectors vs {} in the profile",
            alpha.len(),
            truth.len()
        )));
    }
    let mut err = 0.0;
    let mut healthy = 0usize;
    let mut correct = 0usize;
    for s in 0..truth.len() {
        if truth.alpha[s] > 0.0 {
            err += (alpha[s] - truth.alpha[s]).abs();
            healthy += 1;
        }
        if (beta[s] < BETA_THRESHOLD) == truth.defective[s] {
            correct += 1;
        }
    }
    let mae = if healthy > 0 { err / healthy as f64 } else { 0.0 };
    Ok((mae, correct as f64 / truth.len().max(1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
    pub alpha_mae: Option<f64>,
    pub beta_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn evaluate(method: &str, test: &ImageGrid, reference: &ImageGrid) -> Result<Self> {
        Ok(EvalReport {
            method: method.to_string(),
            psnr: psnr(test, reference)?,
            ssim: ssim(test, reference)?,
            data_range: data_range(reference),
            alpha_mae: None,
            beta_accuracy: None,
        })
    }

    pub fn with_recovery<T: Real>(mut self, learned: &DetectorVariables<T>, truth: &DetectorProfile) -> Result<Self> {
        let (mae, acc) = detector_recovery(learned, truth)?;
        self.alpha_mae = Some(mae);
        self.beta_accuracy = Some(acc);
        Ok(self)
    }

    pub fn with_recovery_from(mut self, alpha: &[f64], beta: &[f64], truth: &DetectorProfile) -> Result<Self> {
        let (mae, acc) = recovery_from_effective(alpha, beta, truth)?;
        self.alpha_mae = Some(mae);
        self.beta_accuracy = Some(acc);
        Ok(self)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("method", self.method.clone()),
            ("psnr_db", format!("{:.6}", self.psnr)),
            ("ssim", format!("{:.6}", self.ssim)),
            ("data_range", format!("{:.6}", self.data_range)),
        ];
        if let Some(v) = self.alpha_mae {
            out.push(("alpha_mae", format!("{v:.6}")));
        }
        if let Some(v) = self.beta_accuracy {
            out.push(("beta_accuracy", format!("{v:.6}")));
        }
        out
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }

    /// Header plus one data row.
    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let header: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let row: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
