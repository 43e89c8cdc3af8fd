//! Training driver: background batch generation, JSON-lines logging and
//! periodic checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scanformer_core::losses::PerceptualBank;
use scanformer_core::model::Model;
use scanformer_core::scene::TrainingExample;
use scanformer_core::train::{train_step, training_batch, OptimizerState, StepOutcome, TrainConfig};
use scanformer_core::Error as CoreError;

use crate::checkpoint::Checkpoint;
use crate::error::Result;

/// Batches generated ahead of the optimizer.
pub const PREFETCH: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub rgb_mse: f64,
    pub rgb_perceptual: f64,
    pub pmap: f64,
    pub cam: f64,
    pub grad_norm: Option<f64>,
    pub elapsed_s: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub state: OptimizerState<f32>,
    bank: PerceptualBank,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let state = OptimizerState::new(model.num_params());
        let bank = PerceptualBank::new(cfg.loss.perceptual_seed);
        Ok(Trainer { cfg, model, state, bank })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt.train.ok_or_else(|| CoreError::ConfigMismatch("checkpoint has no training config".into()))?;
        if cfg.model != *ckpt.model.config() {
            return Err(CoreError::ConfigMismatch("training config and weights disagree".into()).into());
        }
        let state = ckpt.optimizer.ok_or_else(|| CoreError::ConfigMismatch("checkpoint has no optimizer state".into()))?;
        let bank = PerceptualBank::new(cfg.loss.perceptual_seed);
        Ok(Trainer { cfg, model: ckpt.model, state, bank })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), optimizer: Some(self.state.clone()), train: Some(self.cfg.clone()) }
    }

    pub fn step_with(&mut self, batch: &[TrainingExample]) -> Result<StepOutcome> {
        Ok(train_step(&mut self.model, batch, &mut self.state, &self.cfg, &self.bank)?)
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = training_batch(&self.cfg, self.state.step)?;
        self.step_with(&batch)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint path, rewritten every `checkpoint_interval` steps and at the end.
    pub out: Option<PathBuf>,
    /// JSON-lines log, appended to.
    pub log: Option<PathBuf>,
    /// Stop once this many total steps have run.
    pub stop_at: Option<u64>,
}

/// Runs the trainer to the end of its schedule (or `stop_at`), generating
/// batches on a producer thread through a bounded queue.
pub fn run(trainer: &mut Trainer, opts: &RunOptions) -> Result<Vec<LogRecord>> {
    let end = opts.stop_at.unwrap_or(trainer.cfg.steps).min(trainer.cfg.steps);
    let start = trainer.state.step;
    let mut log: Option<BufWriter<File>> = match &opts.log {
        Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let t0 = Instant::now();
    let mut records = Vec::new();
    let cfg = trainer.cfg.clone();
    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel(PREFETCH);
        s.spawn(move || {
            for step in start..end {
                if tx.send(training_batch(&cfg, step)).is_err() {
                    break;
                }
            }
        });
        for batch in rx.iter() {
            let step = trainer.state.step;
            let out = trainer.step_with(&batch?)?;
            let r = out.report;
            let rec = LogRecord {
                step,
                lr: out.lr,
                total: r.total,
                rgb_mse: r.rgb_mse,
                rgb_perceptual: r.rgb_perceptual,
                pmap: r.pmap,
                cam: r.cam,
                grad_norm: out.grad_norm,
                elapsed_s: t0.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            records.push(rec);
            let interval = trainer.cfg.checkpoint_interval;
            if let Some(path) = &opts.out {
                if interval > 0 && trainer.state.step % interval == 0 && trainer.state.step < end {
                    trainer.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    })?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(path) = &opts.out {
        trainer.checkpoint().save(path)?;
    }
    Ok(records)
}
