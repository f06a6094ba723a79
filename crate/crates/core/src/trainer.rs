//! Joint optimisation of the field and the detector variables from a
//! sinogram, one small batch of rays at a time.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{measurement_gradients, predict_measurement, DetectorVariables};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldGradients, FieldParams};
use crate::geometry::{intersect_volume, ray_for, sample_path, ScanGeometry};
use crate::real::Real;
use crate::simulator::{ImageGrid, Sinogram};

/// Value that pins `sigmoid(β⁰)` to exactly 1 in both float widths.
const BETA_RAW_SATURATED: f64 = 40.0;

/// How the data term is aggregated over the rays of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_iterations: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda: f64,
    pub detectors_per_batch: usize,
    pub views_per_batch: usize,
    /// Marching step in mm; half the smallest voxel when unset.
    pub step: Option<f64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub reduction: Reduction,
    /// Learning-rate multiplier for α⁰.
    pub alpha_lr_scale: f64,
    /// Learning-rate multiplier for β⁰.
    pub beta_lr_scale: f64,
    /// Iterations at the start during which β⁰ stays frozen.
    pub beta_warmup: usize,
    /// Keep α fixed at 1.
    pub disable_alpha: bool,
    /// Keep β fixed at 1.
    pub disable_beta: bool,
    pub progress_every: usize,
    pub checkpoint_every: usize,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_iterations: 4000,
            base_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 1000,
            lambda: 0.01,
            detectors_per_batch: 2,
            views_per_batch: 40,
            step: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            reduction: Reduction::Sum,
            alpha_lr_scale: 1.0,
            beta_lr_scale: 1.0,
            beta_warmup: 0,
            disable_alpha: false,
            disable_beta: false,
            progress_every: 100,
            checkpoint_every: 1000,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn rays_per_batch(&self) -> usize {
        self.detectors_per_batch * self.views_per_batch
    }

    pub fn validate(&self) -> Result<()> {
        if self.detectors_per_batch == 0 || self.views_per_batch == 0 {
            return Err(Error::validation("batch sizes must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.base_lr > 0.0) || !(self.alpha_lr_scale >= 0.0 && self.beta_lr_scale >= 0.0) || self.lr_decay_every == 0 {
            return Err(Error::validation("learning-rate settings must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::validation("adam betas must lie in [0, 1)"));
        }
        if let Some(step) = self.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::validation(format!("step must be positive, got {step}")));
            }
        }
        Ok(())
    }
}

/// `base_lr · decay^⌊iteration / every⌋`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_decay_factor.powi((iteration / config.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub detector: usize,
    /// Position of `detector` within [`RayBatch::detectors`].
    pub slot: usize,
    pub measured: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub detectors: Vec<usize>,
    pub views: Vec<usize>,
    /// Detector-major Cartesian product of `detectors` and `views`.
    pub rays: Vec<BatchRay>,
}

/// Which (view, detector) rays yield at least one sample at a given step.
#[derive(Debug, Clone)]
pub struct HitMap {
    n_detectors: usize,
    hits: Vec<bool>,
    /// Detectors with enough usable views to fill a batch on their own.
    eligible: Vec<usize>,
}

impl HitMap {
    pub fn new(geometry: &ScanGeometry, step: f64, min_views: usize) -> Result<Self> {
        let n_det = geometry.detector_count();
        let mut hits = vec![false; geometry.n_views * n_det];
        for view in 0..geometry.n_views {
            for det in 0..n_det {
                let ray = ray_for(geometry, view, det)?;
                if let Some((t0, t1)) = intersect_volume(&ray, geometry) {
                    hits[view * n_det + det] = (t1 - t0) / step + 1e-9 >= 1.0;
                }
            }
        }
        let eligible = (0..n_det)
            .filter(|&d| (0..geometry.n_views).filter(|&v| hits[v * n_det + d]).count() >= min_views)
            .collect();
        Ok(HitMap {
            n_detectors: n_det,
            hits,
            eligible,
        })
    }

    pub fn hit(&self, view: usize, detector: usize) -> bool {
        self.hits[view * self.n_detectors + detector]
    }

    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }
}

/// Draws distinct detectors and distinct views; views whose ray misses the
/// volume for any chosen detector are skipped and replaced by fresh ones.
pub fn sample_batch<R: rand::Rng + ?Sized>(
    sinogram: &Sinogram,
    hits: &HitMap,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<RayBatch> {
    let n_views = sinogram.n_views();
    let (n_d, n_v) = (config.detectors_per_batch, config.views_per_batch);
    if sinogram.n_detectors() < n_d || n_views < n_v {
        return Err(Error::validation(format!(
            "geometry has {} detectors and {} views, batch needs {} and {}",
            sinogram.n_detectors(),
            n_views,
            n_d,
            n_v
        )));
    }
    let eligible = hits.eligible();
    if eligible.len() < n_d {
        return Err(Error::validation(format!(
            "only {} detectors see the volume in at least {n_v} views",
            eligible.len()
        )));
    }
    let mut order: Vec<usize> = (0..n_views).collect();
    for _ in 0..64 {
        let detectors: Vec<usize> = index::sample(rng, eligible.len(), n_d)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        order.shuffle(rng);
        let views: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&v| detectors.iter().all(|&d| hits.hit(v, d)))
            .take(n_v)
            .collect();
        if views.len() < n_v {
            continue;
        }
        let mut rays = Vec::with_capacity(n_d * n_v);
        for (slot, &detector) in detectors.iter().enumerate() {
            for &view in &views {
                rays.push(BatchRay {
                    view,
                    detector,
                    slot,
                    measured: sinogram.get(view, detector) as f64,
                    valid: sinogram.is_valid(view, detector),
                });
            }
        }
        return Ok(RayBatch {
            detectors,
            views,
            rays,
        });
    }
    Err(Error::validation("could not draw a batch of rays that all cross the volume"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<T> {
    pub loss: T,
    /// `∂loss/∂ρ̂` per ray.
    pub d_pred: Vec<T>,
    /// `∂loss/∂β` per batch detector through the target `ρ̃·β` and the
    /// regulariser.
    pub d_beta: Vec<T>,
}

/// `Σ |ρ̂ − ρ̃β| − λ Σ β²` (the data term divided by the ray count under
/// [`Reduction::Mean`]).
pub fn compute_loss<T: Real>(
    batch: &RayBatch,
    predictions: &[T],
    beta: &[T],
    lambda: f64,
    reduction: Reduction,
) -> Result<LossTerms<T>> {
    if predictions.len() != batch.rays.len() || beta.len() != batch.detectors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions / {} betas for {} rays / {} detectors",
            predictions.len(),
            beta.len(),
            batch.rays.len(),
            batch.detectors.len()
        )));
    }
    let weight = match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::of(batch.rays.len().max(1) as f64),
    };
    let lambda = T::of(lambda);
    let mut loss = T::zero();
    let mut d_pred = Vec::with_capacity(predictions.len());
    let mut d_beta = vec![T::zero(); beta.len()];
    for (ray, &pred) in batch.rays.iter().zip(predictions) {
        let measured = T::of(ray.measured);
        let r = pred - measured * beta[ray.slot];
        loss += weight * r.abs();
        let sign = if r > T::zero() {
            weight
        } else if r < T::zero() {
            -weight
        } else {
            T::zero()
        };
        d_pred.push(sign);
        d_beta[ray.slot] -= sign * measured;
    }
    for (d, &b) in d_beta.iter_mut().zip(beta) {
        loss -= lambda * b * b;
        *d -= T::of(2.0) * lambda * b;
    }
    Ok(LossTerms { loss, d_pred, d_beta })
}

/// Adam moments for one named parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroup<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    pub groups: Vec<AdamGroup<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(groups: &[(String, usize)], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            groups: groups
                .iter()
                .map(|(name, len)| AdamGroup {
                    name: name.clone(),
                    m: vec![T::zero(); *len],
                    v: vec![T::zero(); *len],
                })
                .collect(),
        }
    }

    /// One bias-corrected update. `params`, `grads` and `lrs` follow the group
    /// order given at construction; gradients are zeroed afterwards. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &mut [&mut [T]], lrs: &[f64]) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() || lrs.len() != self.groups.len() {
            return Err(Error::ShapeMismatch("adam group count".into()));
        }
        for (g, (grad, param)) in self.groups.iter().zip(grads.iter().zip(params.iter())) {
            if grad.len() != g.m.len() || param.len() != g.m.len() {
                return Err(Error::ShapeMismatch(format!("adam group '{}'", g.name)));
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    group: g.name.clone(),
                    iteration: None,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let eps = T::of(self.epsilon);
        for (i, g) in self.groups.iter_mut().enumerate() {
            let lr = T::of(lrs[i]);
            let param = &mut params[i];
            let grad = &mut grads[i];
            for k in 0..g.m.len() {
                let gk = grad[k];
                g.m[k] = b1 * g.m[k] + (T::one() - b1) * gk;
                g.v[k] = b2 * g.v[k] + (T::one() - b2) * gk * gk;
                let m_hat = g.m[k] / c1;
                let v_hat = g.v[k] / c2;
                param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[k] = T::zero();
            }
        }
        Ok(())
    }
}

/// Per-detector gradients matching [`DetectorVariables`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGradients<T> {
    pub alpha_raw: Vec<T>,
    pub beta_raw: Vec<T>,
}

/// Result of evaluating one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    pub samples: usize,
}

/// Parameters, gradient buffers and optimiser state of one reconstruction.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub geometry: ScanGeometry,
    pub field: FieldParams<T>,
    pub detectors: DetectorVariables<T>,
    pub field_grads: FieldGradients<T>,
    pub detector_grads: DetectorGradients<T>,
    pub adam: Adam<T>,
    pub iteration: usize,
    pub step: f64,
    hits: HitMap,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(geometry: &ScanGeometry, config: &TrainConfig) -> Result<Self> {
        geometry.validate()?;
        config.validate()?;
        let step = config.step.unwrap_or_else(|| geometry.default_step());
        let field = FieldParams::new(geometry.dim(), &config.field, config.seed)?;
        let mut detectors = DetectorVariables::new(geometry.detector_count());
        if config.disable_beta {
            detectors.beta_raw.iter_mut().for_each(|b| *b = T::of(BETA_RAW_SATURATED));
        }
        let hits = HitMap::new(geometry, step, config.views_per_batch)?;
        let field_grads = field.zero_grads();
        let n_det = geometry.detector_count();
        let mut groups: Vec<(String, usize)> = field.groups().into_iter().map(|(n, v)| (n, v.len())).collect();
        groups.push(("alpha_raw".into(), n_det));
        groups.push(("beta_raw".into(), n_det));
        let adam = Adam::new(&groups, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        Ok(Trainer {
            config: config.clone(),
            geometry: geometry.clone(),
            field,
            detectors,
            field_grads,
            detector_grads: DetectorGradients {
                alpha_raw: vec![T::zero(); n_det],
                beta_raw: vec![T::zero(); n_det],
            },
            adam,
            iteration: 0,
            step,
            hits,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        })
    }

    pub fn hit_map(&self) -> &HitMap {
        &self.hits
    }

    pub fn sample_batch(&mut self, sinogram: &Sinogram) -> Result<RayBatch> {
        sample_batch(sinogram, &self.hits, &self.config, &mut self.rng)
    }

    /// Loss of `batch` under the current parameters, without gradients.
    pub fn batch_loss(&self, batch: &RayBatch) -> Result<T> {
        let (points, offsets) = self.batch_points(batch)?;
        let (mu, _) = self.field.forward_batch(&points)?;
        let preds = self.predictions(batch, &mu, &offsets)?;
        let beta: Vec<T> = batch.detectors.iter().map(|&d| self.detectors.beta(d)).collect();
        Ok(compute_loss(batch, &preds, &beta, self.config.lambda, self.config.reduction)?.loss)
    }

    /// Signs that select the linear piece of the batch loss: active ReLUs,
    /// residual signs and the α clamp. Finite differences are only
    /// meaningful while this pattern does not change.
    pub fn kink_pattern(&self, batch: &RayBatch) -> Result<Vec<i8>> {
        let (points, offsets) = self.batch_points(batch)?;
        let (mu, trace) = self.field.forward_batch(&points)?;
        let preds = self.predictions(batch, &mu, &offsets)?;
        let mut out: Vec<i8> = trace.relu_pattern().map(i8::from).collect();
        for (ray, &p) in batch.rays.iter().zip(&preds) {
            let r = p - T::of(ray.measured) * self.detectors.beta(ray.detector);
            out.push(if r > T::zero() { 1 } else if r < T::zero() { -1 } else { 0 });
        }
        out.extend(batch.detectors.iter().map(|&d| i8::from(self.detectors.alpha_raw[d] < T::of(self.detectors.epsilon))));
        Ok(out)
    }

    /// Evaluates `batch` and accumulates all gradients.
    pub fn accumulate_gradients(&mut self, batch: &RayBatch) -> Result<StepReport<T>> {
        let (points, offsets) = self.batch_points(batch)?;
        let (mu, trace) = self.field.forward_batch(&points)?;
        let preds = self.predictions(batch, &mu, &offsets)?;
        let beta: Vec<T> = batch.detectors.iter().map(|&d| self.detectors.beta(d)).collect();
        let terms = compute_loss(batch, &preds, &beta, self.config.lambda, self.config.reduction)?;
        let step = T::of(self.step);
        let mut upstream = vec![T::zero(); mu.len()];
        for (r, ray) in batch.rays.iter().enumerate() {
            let range = offsets[r]..offsets[r + 1];
            let g = measurement_gradients(&mu[range.clone()], step, &self.detectors, ray.detector, terms.d_pred[r]);
            upstream[range].copy_from_slice(&g.d_mu);
            self.detector_grads.alpha_raw[ray.detector] += g.d_alpha_raw;
            self.detector_grads.beta_raw[ray.detector] += g.d_beta_raw;
        }
        for (slot, &d) in batch.detectors.iter().enumerate() {
            let b = beta[slot];
            self.detector_grads.beta_raw[d] += terms.d_beta[slot] * b * (T::one() - b);
        }
        self.field.backward_batch(&trace, &upstream, &mut self.field_grads)?;
        Ok(StepReport {
            loss: terms.loss,
            samples: mu.len(),
        })
    }

    /// Applies Adam at the scheduled learning rate and advances the
    /// iteration counter.
    pub fn apply_update(&mut self) -> Result<()> {
        let lr = lr_at(self.iteration, &self.config);
        let frozen = self.iteration < self.config.beta_warmup;
        if self.config.disable_alpha {
            self.detector_grads.alpha_raw.iter_mut().for_each(|g| *g = T::zero());
        }
        if self.config.disable_beta || frozen {
            self.detector_grads.beta_raw.iter_mut().for_each(|g| *g = T::zero());
        }
        let mut params: Vec<&mut [T]> = Vec::new();
        let mut grads: Vec<&mut [T]> = Vec::new();
        let mut lrs = Vec::new();
        for ((_, p), (_, g)) in self.field.groups_mut().into_iter().zip(self.field_grads.groups_mut()) {
            params.push(p);
            grads.push(g);
            lrs.push(lr);
        }
        params.push(&mut self.detectors.alpha_raw);
        params.push(&mut self.detectors.beta_raw);
        grads.push(&mut self.detector_grads.alpha_raw);
        grads.push(&mut self.detector_grads.beta_raw);
        lrs.push(if self.config.disable_alpha { 0.0 } else { lr * self.config.alpha_lr_scale });
        lrs.push(if self.config.disable_beta { 0.0 } else { lr * self.config.beta_lr_scale });
        self.adam
            .step(&mut params, &mut grads, &lrs)
            .map_err(|e| e.at_iteration(self.iteration))?;
        self.iteration += 1;
        Ok(())
    }

    /// One full iteration: sample, evaluate, backpropagate, update.
    pub fn train_step(&mut self, sinogram: &Sinogram) -> Result<StepReport<T>> {
        let batch = self.sample_batch(sinogram)?;
        let report = self
            .accumulate_gradients(&batch)
            .map_err(|e| e.at_iteration(self.iteration))?;
        self.apply_update()?;
        Ok(report)
    }

    fn batch_points(&self, batch: &RayBatch) -> Result<(Vec<T>, Vec<usize>)> {
        let dim = self.geometry.dim();
        let mut points = Vec::new();
        let mut offsets = Vec::with_capacity(batch.rays.len() + 1);
        offsets.push(0);
        for ray in &batch.rays {
            let path = sample_path(&ray_for(&self.geometry, ray.view, ray.detector)?, &self.geometry, self.step)?;
            for p in &path.normalized {
                points.extend(p[..dim].iter().map(|&c| T::of(c)));
            }
            offsets.push(offsets.last().unwrap() + path.len());
        }
        Ok((points, offsets))
    }

    fn predictions(&self, batch: &RayBatch, mu: &[T], offsets: &[usize]) -> Result<Vec<T>> {
        let step = T::of(self.step);
        batch
            .rays
            .iter()
            .enumerate()
            .map(|(r, ray)| {
                predict_measurement(
                    &mu[offsets[r]..offsets[r + 1]],
                    step,
                    self.detectors.alpha(ray.detector),
                    self.detectors.beta(ray.detector),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a, T: Real> {
    /// Mean loss over the last `progress_every` iterations.
    Progress { iteration: usize, mean_loss: f64, lr: f64 },
    Checkpoint { iteration: usize, trainer: &'a Trainer<T> },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real = f32> {
    pub field: FieldParams<T>,
    pub detectors: DetectorVariables<T>,
    pub history: Vec<LossRecord>,
}

/// Runs the full optimisation loop.
pub fn train<T: Real>(sinogram: &Sinogram, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(sinogram, config, |_| Ok(()))
}

pub fn train_with<T: Real, F>(sinogram: &Sinogram, config: &TrainConfig, mut observer: F) -> Result<TrainOutcome<T>>
where
    F: FnMut(TrainEvent<'_, T>) -> Result<()>,
{
    sinogram.check()?;
    let mut trainer = Trainer::<T>::new(&sinogram.geometry, config)?;
    let mut history = Vec::with_capacity(config.n_iterations);
    let mut window = 0.0;
    for it in 0..config.n_iterations {
        let lr = lr_at(it, config);
        let report = trainer.train_step(sinogram)?;
        let loss = report.loss.as_f64();
        history.push(LossRecord { iteration: it, loss, lr });
        window += loss;
        let done = it + 1;
        if config.progress_every > 0 && done % config.progress_every == 0 {
            observer(TrainEvent::Progress {
                iteration: done,
                mean_loss: window / config.progress_every as f64,
                lr,
            })?;
            window = 0.0;
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.n_iterations {
            observer(TrainEvent::Checkpoint {
                iteration: done,
                trainer: &trainer,
            })?;
        }
    }
    observer(TrainEvent::Checkpoint {
        iteration: config.n_iterations,
        trainer: &trainer,
    })?;
    Ok(TrainOutcome {
        field: trainer.field,
        detectors: trainer.detectors,
        history,
    })
}

/// Evaluates the field at every voxel centre, clamping negatives to zero.
pub fn extract_image<T: Real>(field: &FieldParams<T>, geometry: &ScanGeometry) -> Result<ImageGrid> {
    if field.dim() != geometry.dim() {
        return Err(Error::Dimension(format!(
            "{}D field for a {}D geometry",
            field.dim(),
            geometry.dim()
        )));
    }
    const CHUNK: usize = 4096;
    let dim = geometry.dim();
    let mut values = Vec::with_capacity(geometry.voxel_count());
    let mut points = Vec::with_capacity(CHUNK * dim);
    let flush = |points: &mut Vec<T>, values: &mut Vec<f64>| -> Result<()> {
        let (mu, _) = field.forward_batch(points)?;
        values.extend(mu.iter().map(|m| m.as_f64().max(0.0)));
        points.clear();
        Ok(())
    };
    for p in geometry.voxel_centers() {
        let q = geometry.normalize(p);
        points.extend(q[..dim].iter().map(|&c| T::of(c)));
        if points.len() == CHUNK * dim {
            flush(&mut points, &mut values)?;
        }
    }
    if !points.is_empty() {
        flush(&mut points, &mut values)?;
    }
    ImageGrid::new(geometry.grid_shape.clone(), geometry.voxel_size.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DetectorCount;
    use crate::simulator::{corrupt, ideal_sinogram, sample_detector_profile, shepp_logan, CorruptionSpec};
    use rand::Rng;

    fn tiny_geometry() -> ScanGeometry {
        ScanGeometry {
            n_views: 20,
            n_detectors: DetectorCount::Line(20),
            detector_spacing: 25.0,
            grid_shape: vec![16, 16],
            voxel_size: vec![16.0, 16.0],
            ..ScanGeometry::fan2d_default()
        }
    }

    fn tiny_sinogram() -> Sinogram {
        let g = tiny_geometry();
        let img = shepp_logan(&[16, 16]).unwrap();
        let img = ImageGrid::new(img.shape.clone(), g.voxel_size.clone(), img.values).unwrap().scaled(0.01);
        let clean = ideal_sinogram(&img, &g).unwrap();
        let profile = sample_detector_profile(&g, &CorruptionSpec::default(), 1).unwrap();
        corrupt(&clean, &profile, 1e7, true, 2).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            views_per_batch: 10,
            ..TrainConfig::default()
        }
    }

    fn batch(detectors: &[usize], views: &[usize], measured: &[f64]) -> RayBatch {
        let mut rays = Vec::new();
        for (slot, &detector) in detectors.iter().enumerate() {
            for &view in views {
                rays.push(BatchRay {
                    view,
                    detector,
                    slot,
                    measured: measured[rays.len()],
                    valid: true,
                });
            }
        }
        RayBatch {
            detectors: detectors.to_vec(),
            views: views.to_vec(),
            rays,
        }
    }

    #[test]
    fn loss_examples() {
        let b = batch(&[0, 1], &[0, 1], &[1.0, 2.0, 3.0, 4.0]);
        let t = compute_loss(&b, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 0.01, Reduction::Sum).unwrap();
        assert!((t.loss - -0.02f64).abs() < 1e-15);
        assert_eq!(t.d_pred, vec![0.0; 4]);
        let t = compute_loss(&b, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 0.0, Reduction::Sum).unwrap();
        assert_eq!(t.loss, 0.0);

        let one = batch(&[3], &[0], &[1.0]);
        let t = compute_loss(&one, &[2.0], &[1.0], 0.0, Reduction::Sum).unwrap();
        assert_eq!(t.loss, 1.0);
        assert_eq!(t.d_pred, vec![1.0]);
        assert_eq!(t.d_beta, vec![-1.0]);
    }

    #[test]
    fn loss_beta_gradient_matches_finite_differences() {
        let b = batch(&[0, 1], &[0, 1, 2], &[1.0, 2.5, 0.3, 4.0, 0.7, 1.1]);
        let preds = [0.4, 2.0, 0.9, 3.0, 0.2, 1.5];
        let beta = [0.7, 0.4];
        let t = compute_loss(&b, &preds, &beta, 0.3, Reduction::Sum).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            let mut up = beta;
            let mut dn = beta;
            up[s] += h;
            dn[s] -= h;
            let f = |bb: &[f64]| compute_loss(&b, &preds, bb, 0.3, Reduction::Sum).unwrap().loss;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - t.d_beta[s]).abs() < 1e-8, "{fd} vs {}", t.d_beta[s]);
        }
    }

    #[test]
    fn mean_reduction_scales_the_data_term_only() {
        let b = batch(&[0, 1], &[0, 1], &[1.0, 1.0, 1.0, 1.0]);
        let s = compute_loss(&b, &[2.0; 4], &[1.0, 1.0], 0.5, Reduction::Sum).unwrap();
        let m = compute_loss(&b, &[2.0; 4], &[1.0, 1.0], 0.5, Reduction::Mean).unwrap();
        assert_eq!(s.loss, 4.0 - 1.0);
        assert_eq!(m.loss, 1.0 - 1.0);
        assert_eq!(m.d_pred, vec![0.25; 4]);
    }

    #[test]
    fn loss_rejects_misaligned_inputs() {
        let b = batch(&[0], &[0, 1], &[1.0, 1.0]);
        assert!(matches!(
            compute_loss(&b, &[1.0], &[1.0], 0.0, Reduction::Sum),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(compute_loss(&b, &[1.0, 1.0], &[1.0, 1.0], 0.0, Reduction::Sum).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(999, &c), 1e-3);
        assert_eq!(lr_at(1000, &c), 5e-4);
        assert_eq!(lr_at(3999, &c), 1.25e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(&[("p".into(), 3)], 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 1.0, -2.0];
        let mut g = vec![0.5, -3.0, 1e-3];
        adam.step(&mut [&mut p], &mut [&mut g], &[1e-3]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1.001).abs() < 1e-9);
        assert!((p[2] + 2.001).abs() < 1e-8);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters_and_decays_moments() {
        let mut adam = Adam::<f64>::new(&[("p".into(), 1)], 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        adam.step(&mut [&mut p], &mut [&mut vec![2.0]], &[0.0]).unwrap();
        let (m, v) = (adam.groups[0].m[0], adam.groups[0].v[0]);
        adam.step(&mut [&mut p], &mut [&mut vec![0.0]], &[0.0]).unwrap();
        assert_eq!(p, vec![1.0]);
        assert!((adam.groups[0].m[0] - 0.9 * m).abs() < 1e-15);
        assert!((adam.groups[0].v[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn adam_names_the_non_finite_group() {
        let mut adam = Adam::<f32>::new(&[("a".into(), 1), ("b".into(), 1)], 0.9, 0.999, 1e-8);
        let (mut pa, mut pb) = (vec![1.0], vec![1.0]);
        let err = adam
            .step(&mut [&mut pa, &mut pb], &mut [&mut vec![1.0], &mut vec![f32::NAN]], &[1e-3, 1e-3])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref group, .. } if group == "b"));
        assert_eq!((pa[0], pb[0]), (1.0, 1.0));
    }

    #[test]
    fn default_batches_have_80_rays_on_two_detectors() {
        let g = ScanGeometry {
            grid_shape: vec![64, 64],
            voxel_size: vec![4.0, 4.0],
            ..ScanGeometry::fan2d_default()
        };
        let sino = Sinogram::zeros(&g);
        let config = TrainConfig::default();
        let hits = HitMap::new(&g, g.default_step(), config.views_per_batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = sample_batch(&sino, &hits, &config, &mut rng).unwrap();
            assert_eq!(b.rays.len(), 80);
            assert_eq!(b.detectors.len(), 2);
            assert_ne!(b.detectors[0], b.detectors[1]);
            let mut views = b.views.clone();
            views.sort();
            views.dedup();
            assert_eq!(views.len(), 40);
            assert!(b.rays.iter().all(|r| hits.hit(r.view, r.detector)));
            assert!(b.rays.iter().all(|r| b.detectors[r.slot] == r.detector));
        }
    }

    #[test]
    fn batch_sequence_is_seeded() {
        let sino = tiny_sinogram();
        let config = tiny_config();
        let draw = |seed| {
            let hits = HitMap::new(&sino.geometry, 8.0, config.views_per_batch).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_batch(&sino, &hits, &config, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let sino = tiny_sinogram();
        let config = TrainConfig::default();
        let hits = HitMap::new(&sino.geometry, 8.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&sino, &hits, &config, &mut rng).is_err());
    }

    fn perturbed(trainer: &Trainer<f64>, group: &str, index: usize, delta: f64) -> Trainer<f64> {
        let mut t = trainer.clone();
        match group {
            "alpha_raw" => t.detectors.alpha_raw[index] += delta,
            "beta_raw" => t.detectors.beta_raw[index] += delta,
            _ => {
                for (name, values) in t.field.groups_mut() {
                    if name == group {
                        values[index] += delta;
                    }
                }
            }
        }
        t
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let sino = tiny_sinogram();
        let mut trainer = Trainer::<f64>::new(&sino.geometry, &tiny_config()).unwrap();
        for _ in 0..30 {
            trainer.train_step(&sino).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for s in 0..20 {
            trainer.detectors.alpha_raw[s] = rng.random_range(0.8..1.2);
            trainer.detectors.beta_raw[s] = rng.random_range(-1.0..2.0);
        }
        let b = trainer.sample_batch(&sino).unwrap();
        trainer.accumulate_gradients(&b).unwrap();

        let mut candidates: Vec<(String, usize, f64)> = Vec::new();
        for (name, g) in trainer.field_grads.groups() {
            for (i, &v) in g.iter().enumerate() {
                if v != 0.0 {
                    candidates.push((name.clone(), i, v));
                }
            }
        }
        for &d in &b.detectors {
            candidates.push(("alpha_raw".into(), d, trainer.detector_grads.alpha_raw[d]));
            candidates.push(("beta_raw".into(), d, trainer.detector_grads.beta_raw[d]));
        }
        let picks = index::sample(&mut rng, candidates.len() - 4, 46);
        let mut chosen: Vec<_> = picks.into_iter().map(|i| candidates[i].clone()).collect();
        chosen.extend(candidates[candidates.len() - 4..].iter().cloned());
        let h = 1e-4;
        let base = trainer.kink_pattern(&b).unwrap();
        let mut checked = 0;
        for (group, i, analytic) in chosen {
            let (up, dn) = (perturbed(&trainer, &group, i, h), perturbed(&trainer, &group, i, -h));
            if up.kink_pattern(&b).unwrap() != base || dn.kink_pattern(&b).unwrap() != base {
                continue;
            }
            let fd = (up.batch_loss(&b).unwrap() - dn.batch_loss(&b).unwrap()) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{group}[{i}]: analytic {analytic:e} vs fd {fd:e}");
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} parameters away from kinks");
    }

    #[test]
    fn disabled_variables_stay_fixed() {
        let sino = tiny_sinogram();
        let config = TrainConfig {
            disable_alpha: true,
            disable_beta: true,
            ..tiny_config()
        };
        let mut trainer = Trainer::<f32>::new(&sino.geometry, &config).unwrap();
        for _ in 0..20 {
            trainer.train_step(&sino).unwrap();
        }
        assert!(trainer.detectors.alpha_raw.iter().all(|&a| a == 1.0));
        assert!((0..20).all(|s| trainer.detectors.beta(s) == 1.0));
    }

    #[test]
    fn beta_warmup_freezes_beta_only() {
        let sino = tiny_sinogram();
        let config = TrainConfig {
            beta_warmup: 10,
            ..tiny_config()
        };
        let mut trainer = Trainer::<f32>::new(&sino.geometry, &config).unwrap();
        for _ in 0..10 {
            trainer.train_step(&sino).unwrap();
        }
        assert!(trainer.detectors.beta_raw.iter().all(|&b| b == 1.0));
        assert!(trainer.detectors.alpha_raw.iter().any(|&a| a != 1.0));
    }

    #[test]
    fn non_finite_gradients_fail_with_the_iteration() {
        let mut sino = tiny_sinogram();
        let mut trainer = Trainer::<f32>::new(&sino.geometry, &tiny_config()).unwrap();
        for _ in 0..3 {
            trainer.train_step(&sino).unwrap();
        }
        trainer.field.mlp.layers[1].bias[0] = f32::INFINITY;
        sino.values.iter_mut().for_each(|v| *v = 1.0);
        let err = trainer.train_step(&sino).unwrap_err();
        match err {
            Error::NonFinite { iteration, .. } => assert_eq!(iteration, Some(3)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn training_reduces_the_loss_and_is_deterministic() {
        let sino = tiny_sinogram();
        let config = TrainConfig {
            n_iterations: 300,
            ..tiny_config()
        };
        let run = || train::<f32>(&sino, &config).unwrap();
        let a = run();
        let head: f64 = a.history[..100].iter().map(|r| r.loss).sum();
        let tail: f64 = a.history[200..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{tail} !< {head}");
        let b = run();
        assert_eq!(a.field, b.field);
        assert_eq!(a.detectors, b.detectors);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn observer_sees_progress_and_checkpoints() {
        let sino = tiny_sinogram();
        let config = TrainConfig {
            n_iterations: 25,
            progress_every: 10,
            checkpoint_every: 10,
            ..tiny_config()
        };
        let mut progress = Vec::new();
        let mut checkpoints = Vec::new();
        train_with::<f32, _>(&sino, &config, |e| {
            match e {
                TrainEvent::Progress { iteration, .. } => progress.push(iteration),
                TrainEvent::Checkpoint { iteration, trainer } => {
                    assert_eq!(trainer.iteration, iteration);
                    checkpoints.push(iteration)
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(progress, vec![10, 20]);
        assert_eq!(checkpoints, vec![10, 20, 25]);
    }

    #[test]
    fn extracted_image_follows_the_field() {
        let g = tiny_geometry();
        let mut field = FieldParams::<f32>::new(2, &FieldConfig::default(), 0).unwrap();
        let img = extract_image(&field, &g).unwrap();
        assert_eq!(img.shape, g.grid_shape);
        assert_eq!(img.voxel_size, g.voxel_size);

        for layer in &mut field.mlp.layers {
            layer.weight.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        assert!(extract_image(&field, &g).unwrap().values.iter().all(|&v| v == 0.0));
        field.mlp.layers.last_mut().unwrap().bias[0] = 0.25;
        assert!(extract_image(&field, &g).unwrap().values.iter().all(|&v| v == 0.25));
        field.mlp.layers.last_mut().unwrap().bias[0] = -0.25;
        assert!(extract_image(&field, &g).unwrap().values.iter().all(|&v| v == 0.0));

        let field3 = FieldParams::<f32>::new(3, &FieldConfig::default(), 0).unwrap();
        assert!(matches!(extract_image(&field3, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(toml_like_parse("n_iterations = 5\nbogus = 1").is_err());
        assert!(TrainConfig { lambda: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { views_per_batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().rays_per_batch(), 80);
    }

    fn toml_like_parse(text: &str) -> std::result::Result<TrainConfig, serde::de::value::Error> {
        use serde::de::value::{Error as DeError, MapDeserializer};
        use serde::de::IntoDeserializer;
        let pairs: Vec<(String, u64)> = text
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.trim().to_string(), v.trim().parse().unwrap())
            })
            .collect();
        let de: MapDeserializer<'_, _, DeError> =
            MapDeserializer::new(pairs.into_iter().map(|(k, v)| (k.into_deserializer(), v.into_deserializer())));
        TrainConfig::deserialize(de)
    }
}
