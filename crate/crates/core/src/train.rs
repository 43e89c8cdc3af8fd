//! Optimisation: learning-rate schedule, Adam, gradient accumulation and the
//! per-batch training step.
//!
//! One training step is one forward/backward over a batch of examples. The
//! optimizer applies an update every `accumulation` steps using the mean
//! gradient over every example seen in the window.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::losses::{group_loss, LossReport, LossWeights, PerceptualBank};
use crate::model::{Model, ModelConfig, OutputGrads, TargetGrads};
use crate::real::Real;
use crate::scene::{draw_examples, make_scene, RenderedView, RigConfig, TrainingExample, TARGETS_PER_DRAW};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub steps: u64,
    /// Scenes drawn per step; each contributes one multi-target draw.
    pub batch_scenes: usize,
    pub accumulation: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub rig: RigConfig,
    /// Training scenes; held-out scenes are seeded past this range.
    pub dataset_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_scenes: 1,
            accumulation: 2,
            peak_lr: 6e-4,
            warmup: 300,
            seed: 0,
            checkpoint_interval: 500,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            rig: RigConfig::default(),
            dataset_size: 500,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m));
        if self.steps == 0 || self.warmup >= self.steps {
            return bad("warmup must be shorter than the run");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak learning rate must be positive");
        }
        if self.accumulation == 0 || self.batch_scenes == 0 || self.dataset_size == 0 {
            return bad("accumulation, batch and dataset sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam hyperparameters out of range");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Linear warmup from 0 to the peak, then cosine decay towards 0.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::StepOutOfRange { step, steps: cfg.steps });
    }
    if step < cfg.warmup {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup as f64);
    }
    let t = (step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t)))
}

/// Seed of the scene at `index` of a run's scene pool. Indices at or beyond
/// `dataset_size` are held out.
pub fn scene_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index
}

const STEP_STREAM: u64 = 0x5354_4550_0000_0005;

/// The examples of training step `step`: one seven-view draw from each of
/// `batch_scenes` scenes picked from the training pool. Depends only on the
/// config and the step, so resumed runs see the same data.
pub fn training_batch(cfg: &TrainConfig, step: u64) -> Result<Vec<TrainingExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0xd605_bbb5_8c8a_bd3b));
    rng.set_stream(STEP_STREAM);
    let mut out = Vec::with_capacity(cfg.batch_scenes * TARGETS_PER_DRAW);
    for _ in 0..cfg.batch_scenes {
        let index = rng.random_range(0..cfg.dataset_size as u64);
        let scene = make_scene(scene_seed(cfg.seed, index));
        out.extend(draw_examples(&scene, &cfg.rig, rng.random())?);
    }
    Ok(out)
}

/// Adam moments plus the open accumulation window.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// Training steps taken.
    pub step: u64,
    /// Parameter updates applied.
    pub updates: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Summed gradient of the open window.
    pub grad_sum: Vec<T>,
    /// Examples in the open window.
    pub window_examples: u64,
    /// Steps in the open window.
    pub window_steps: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(num_params: usize) -> Self {
        OptimizerState {
            step: 0,
            updates: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            grad_sum: vec![T::zero(); num_params],
            window_examples: 0,
            window_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean over the batch's examples.
    pub report: LossReport,
    pub lr: f64,
    /// Norm of the mean window gradient before clipping, set on update steps.
    pub grad_norm: Option<f64>,
}

/// Splits a batch into runs of consecutive examples sharing the same source
/// views, each answered by a single multi-target forward.
pub fn group_by_sources(batch: &[TrainingExample]) -> Vec<core::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=batch.len() {
        if i == batch.len() || !Arc::ptr_eq(&batch[i].sources, &batch[start].sources) {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

/// Sums loss and gradient of every example in `batch` into `grad_sum`;
/// returns the summed report.
pub fn accumulate_gradients<T: Real>(
    model: &Model<T>,
    batch: &[TrainingExample],
    weights: &LossWeights,
    bank: &PerceptualBank,
    grad_sum: &mut [T],
) -> Result<LossReport> {
    let mut report = LossReport::default();
    let pixels = model.config().pixels();
    for range in group_by_sources(batch) {
        let examples: Vec<&TrainingExample> = batch[range].iter().collect();
        let sources: &[RenderedView] = &examples[0].sources;
        let images: Vec<&[f32]> = sources.iter().map(|v| v.rgb.as_slice()).collect();
        let intr = sources[0].pose.intrinsics;
        let targets: Vec<CameraPose> = examples.iter().map(|e| e.target.pose).collect();
        let (out, tape) = model.forward_train(&images, &intr, &targets)?;
        let mut grads = OutputGrads {
            raw_poses: vec![[T::zero(); 9]; sources.len()],
            targets: (0..examples.len()).map(|_| TargetGrads::zeros(pixels)).collect(),
        };
        let r = group_loss(&out, &examples, weights, bank, Some((&mut grads, T::one())))?;
        model.backward(&tape, &grads, grad_sum)?;
        report.add(&r);
    }
    Ok(report)
}

/// One training step. Gradients join the open window; when the window holds
/// `accumulation` steps their mean is clipped and applied with Adam at the
/// scheduled rate for this step.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    batch: &[TrainingExample],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    bank: &PerceptualBank,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if state.m.len() != model.num_params() {
        return Err(Error::shape("optimizer state does not match the model"));
    }
    let step = state.step;
    let lr = lr_schedule(step, cfg)?;
    let sum = accumulate_gradients(model, batch, &cfg.loss, bank, &mut state.grad_sum)?;
    let report = sum.scaled(1.0 / batch.len() as f64);
    if !report.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("{report:?}") });
    }
    state.window_examples += batch.len() as u64;
    state.window_steps += 1;
    state.step += 1;
    let mut grad_norm = None;
    if state.window_steps as usize == cfg.accumulation {
        grad_norm = Some(apply_update(model, state, cfg, lr)?);
    }
    Ok(StepOutcome { report, lr, grad_norm })
}

fn apply_update<T: Real>(model: &mut Model<T>, state: &mut OptimizerState<T>, cfg: &TrainConfig, lr: f64) -> Result<f64> {
    let inv = T::c(1.0 / state.window_examples as f64);
    let mut sq = 0.0;
    for g in state.grad_sum.iter_mut() {
        *g *= inv;
        sq += g.f64() * g.f64();
    }
    let norm: f64 = num_traits::Float::sqrt(sq);
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step - 1, detail: format!("gradient norm {norm}") });
    }
    let clip = T::c(if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 });
    state.updates += 1;
    let t = state.updates as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::c(1.0 - num_traits::Float::powi(cfg.beta1, t));
    let bc2 = T::c(1.0 - num_traits::Float::powi(cfg.beta2, t));
    let (lr, eps, one) = (T::c(lr), T::c(cfg.adam_eps), T::one());
    let params = model.params_mut();
    for i in 0..params.len() {
        let g = state.grad_sum[i] * clip;
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        state.grad_sum[i] = T::zero();
    }
    state.window_examples = 0;
    state.window_steps = 0;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_schedule(300, &cfg).unwrap(), 6e-4);
        assert!(lr_schedule(4999, &cfg).unwrap() <= 6e-4 * 1e-6);
        assert!(matches!(lr_schedule(5000, &cfg), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_is_continuous_at_junction() {
        let cfg = TrainConfig::default();
        let before = lr_schedule(299, &cfg).unwrap();
        let at = lr_schedule(300, &cfg).unwrap();
        let after = lr_schedule(301, &cfg).unwrap();
        assert!((at - before - 2e-6).abs() < 1e-12);
        assert!(at - after < 1e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { warmup: 5000, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { peak_lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { accumulation: 0, ..ok }.validate().is_err());
    }
}
