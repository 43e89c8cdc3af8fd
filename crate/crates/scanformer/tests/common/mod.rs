#![allow(dead_code)]

use scanformer::image_io::encode_png;
use scanformer_core::model::{Model, ModelConfig};
use scanformer_core::scene::{draw_examples, make_scene, RigConfig};
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

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        steps: 40,
        warmup: 4,
        peak_lr: 3e-3,
        checkpoint_interval: 0,
        model: tiny_model(),
        rig: RigConfig { resolution: 16, views_per_scene: 14, ..RigConfig::default() },
        dataset_size: 8,
        ..TrainConfig::default()
    }
}

pub fn tiny() -> Model<f32> {
    Model::new(tiny_model()).unwrap()
}

/// Source images of one procedural scene at the tiny resolution.
pub fn source_rgb(scene: u64) -> Vec<Vec<f32>> {
    let rig = tiny_train().rig;
    let ex = draw_examples(&make_scene(scene), &rig, scene).unwrap();
    ex[0].sources.iter().map(|v| v.rgb.clone()).collect()
}

pub fn source_pngs(scene: u64) -> Vec<Vec<u8>> {
    source_rgb(scene).iter().map(|rgb| encode_png(16, 16, rgb).unwrap()).collect()
}
