//! Model and optimizer checkpoints in the RNGT container.
//!
//! Each parameter tensor is stored under `param/<name>` with its shape; the
//! optimizer adds `adam/m`, `adam/v` and the open accumulation window
//! `adam/grad_sum`. Configs, counters and the weight fingerprint live in the
//! JSON metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scanformer_core::model::{Model, ModelConfig};
use scanformer_core::train::{OptimizerState, TrainConfig};
use scanformer_core::Error as CoreError;

use crate::error::{IoError, Result};
use crate::rngt::{Container, Tensor};

pub const KIND: &str = "scanformer-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Meta {
    kind: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    /// Hex so that the full 64 bits survive JSON readers using doubles.
    fingerprint: String,
    optimizer: Option<OptimizerCounters>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
struct OptimizerCounters {
    step: u64,
    updates: u64,
    window_examples: u64,
    window_steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn weights_only(model: Model<f32>) -> Self {
        Checkpoint { model, optimizer: None, train: None }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = Vec::new();
        for spec in self.model.specs() {
            let data = self.model.params()[spec.range()].to_vec();
            tensors.push(Tensor::new(format!("param/{}", spec.name), &spec.shape, data)?);
        }
        if let Some(o) = &self.optimizer {
            for (name, v) in [("adam/m", &o.m), ("adam/v", &o.v), ("adam/grad_sum", &o.grad_sum)] {
                tensors.push(Tensor::new(name, &[v.len()], v.clone())?);
            }
        }
        let meta = Meta {
            kind: KIND.into(),
            model: self.model.config().clone(),
            train: self.train.clone(),
            fingerprint: format!("{:016x}", self.model.fingerprint()),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerCounters {
                step: o.step,
                updates: o.updates,
                window_examples: o.window_examples,
                window_steps: o.window_steps,
            }),
        };
        Container::new(tensors, &serde_json::to_value(meta)?)
    }

    /// Rebuilds a checkpoint. With `expected`, a differing model config is a
    /// config-mismatch error.
    pub fn from_container(c: &Container, expected: Option<&ModelConfig>) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(&c.metadata)?;
        if meta.kind != KIND {
            return Err(IoError::Format(format!("not a checkpoint: kind {}", meta.kind)));
        }
        if let Some(want) = expected {
            if *want != meta.model {
                return Err(CoreError::ConfigMismatch(format!("checkpoint holds {:?}, expected {:?}", meta.model, want)).into());
            }
        }
        let specs = Model::<f32>::specs_for(&meta.model)?;
        let total: usize = specs.iter().map(|s| s.len()).sum();
        let mut params = vec![0.0f32; total];
        for spec in &specs {
            let t = c.require(&format!("param/{}", spec.name))?;
            let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
            if dims != spec.shape {
                return Err(CoreError::ConfigMismatch(format!("{} has shape {dims:?}, expected {:?}", spec.name, spec.shape)).into());
            }
            params[spec.range()].copy_from_slice(&t.data);
        }
        let param_tensors = c.tensors.iter().filter(|t| t.name.starts_with("param/")).count();
        if param_tensors != specs.len() {
            return Err(CoreError::ConfigMismatch(format!("{param_tensors} parameter tensors for {} expected", specs.len())).into());
        }
        let model = Model::from_params(meta.model, params)?;
        let fp = format!("{:016x}", model.fingerprint());
        if fp != meta.fingerprint {
            return Err(IoError::Format(format!("weight fingerprint {fp} does not match recorded {}", meta.fingerprint)));
        }
        let optimizer = match meta.optimizer {
            None => None,
            Some(k) => {
                let get = |name: &str| -> Result<Vec<f32>> {
                    let t = c.require(name)?;
                    if t.data.len() != total {
                        return Err(IoError::Format(format!("{name} has {} entries for {total} parameters", t.data.len())));
                    }
                    Ok(t.data.clone())
                };
                Some(OptimizerState {
                    step: k.step,
                    updates: k.updates,
                    m: get("adam/m")?,
                    v: get("adam/v")?,
                    grad_sum: get("adam/grad_sum")?,
                    window_examples: k.window_examples,
                    window_steps: k.window_steps,
                })
            }
        };
        Ok(Checkpoint { model, optimizer, train: meta.train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_container(&Container::read(path)?, expected)
    }
}
