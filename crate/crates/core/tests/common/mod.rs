#![allow(dead_code)]

use scanformer_core::model::ModelConfig;
use scanformer_core::scene::{draw_examples, make_scene, RigConfig, TrainingExample};
use scanformer_core::train::TrainConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        patch: 4,
        registers: 1,
        resolution: 16,
        head_channels: vec![8, 6, 4],
        camera_hidden: 16,
        sources: 4,
        seed: 5,
    }
}

pub fn tiny_rig() -> RigConfig {
    RigConfig { resolution: 16, views_per_scene: 10, ..RigConfig::default() }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        steps: 600,
        warmup: 20,
        peak_lr: 3e-3,
        checkpoint_interval: 0,
        model: tiny_model(),
        rig: tiny_rig(),
        dataset_size: 8,
        ..TrainConfig::default()
    }
}

/// The three examples of one draw from scene `scene`.
pub fn draw(scene: u64, seed: u64) -> Vec<TrainingExample> {
    draw_examples(&make_scene(scene), &tiny_rig(), seed).unwrap()
}
