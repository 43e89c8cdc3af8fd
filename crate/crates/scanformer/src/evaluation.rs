//! Held-out evaluation, scan accumulation from images, and the efficiency
//! benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use scanformer_core::geometry::{CameraPose, Intrinsics, PointCloud};
use scanformer_core::linalg::Vec3;
use scanformer_core::metrics::{evaluate_scene, scan_points, EvalReport, SceneEval};
use scanformer_core::model::{Model, ModelConfig};
use scanformer_core::scene::{make_scene, RigConfig};
use scanformer_core::train::{scene_seed, TrainConfig};

use crate::alloc_stats::peak_during;
use crate::error::{IoError, Result};
use crate::image_io::RgbImage;

/// Target views per held-out scene.
pub const EVAL_TARGETS: usize = 10;

/// Scenes `dataset_size..dataset_size + n` of the training run's pool, each
/// scored from four sources on ten targets.
pub fn evaluate_held_out(model: &Model<f32>, train: &TrainConfig, n_scenes: usize, seed: u64) -> Result<(EvalReport, Vec<SceneEval>)> {
    let mut scenes = Vec::with_capacity(n_scenes);
    for k in 0..n_scenes as u64 {
        let scene = make_scene(scene_seed(train.seed, train.dataset_size as u64 + k));
        let view_seed = seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ k;
        scenes.push(evaluate_scene(model, &scene, &train.rig, view_seed, EVAL_TARGETS)?);
    }
    Ok((EvalReport::aggregate(&scenes), scenes))
}

pub fn report_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EvalReport::COLUMNS).map_err(|e| IoError::Format(e.to_string()))?;
    w.write_record(report.values().iter().map(|v| v.to_string())).map_err(|e| IoError::Format(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| IoError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| IoError::Format(e.to_string()))
}

/// Source images as model input, checked against the config.
pub fn source_images(images: &[RgbImage], cfg: &ModelConfig) -> Result<Vec<Vec<f32>>> {
    if images.len() != cfg.sources {
        return Err(IoError::Usage(format!("expected {} source images, got {}", cfg.sources, images.len())));
    }
    images
        .iter()
        .map(|im| {
            if im.width != cfg.resolution || im.height != cfg.resolution {
                return Err(IoError::Usage(format!(
                    "image is {}x{}, model expects {r}x{r}",
                    im.width,
                    im.height,
                    r = cfg.resolution
                )));
            }
            Ok(im.data.clone())
        })
        .collect()
}

pub fn model_intrinsics(cfg: &ModelConfig, fov_deg: f64) -> Intrinsics {
    Intrinsics::from_fov(cfg.resolution, cfg.resolution, fov_deg)
}

/// `k` cameras on a Fibonacci sphere of the given radius, all looking at the
/// origin of the normalised frame with the first view's up direction.
pub fn sphere_poses(k: usize, radius: f64, intrinsics: Intrinsics) -> Result<Vec<CameraPose>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..k)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            let dir = Vec3::new(r * phi.cos(), y, r * phi.sin());
            Ok(CameraPose::look_at(dir * radius, Vec3::ZERO, Vec3::new(0.0, -1.0, 0.0), Vec3::X, intrinsics)?)
        })
        .collect()
}

/// Accumulates confidence-filtered foreground points from `views` cached
/// queries on a sphere of `radius` around the normalised scene.
pub fn scan_images(model: &Model<f32>, images: &[RgbImage], fov_deg: f64, views: usize, radius: f64, quantile: f64) -> Result<(Vec<CameraPose>, PointCloud)> {
    if views == 0 {
        return Err(IoError::Usage("--views must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(IoError::Usage(format!("confidence quantile {quantile} outside [0, 1]")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(IoError::Usage(format!("radius {radius} must be positive")));
    }
    let cfg = model.config();
    let sources = source_images(images, cfg)?;
    let refs: Vec<&[f32]> = sources.iter().map(Vec::as_slice).collect();
    let intr = model_intrinsics(cfg, fov_deg);
    let stage1 = model.forward_stage1(&refs, &intr)?;
    let mut cloud = PointCloud { points: Vec::new(), colors: Some(Vec::new()), confidences: Some(Vec::new()) };
    for pose in sphere_poses(views, radius, intr)? {
        let (maps, _) = model.forward_stage2(&pose, &stage1.cache)?;
        cloud.extend(&scan_points(&maps, quantile)?);
    }
    if cloud.is_empty() {
        return Err(IoError::Usage("no foreground point passed the confidence filter".into()));
    }
    Ok((stage1.poses, cloud))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub n_sources: usize,
    pub n_queries: usize,
    /// Counted operations of one joint forward with a single target.
    pub joint_flops: u64,
    /// Counted operations of one cached target query.
    pub stage2_flops: u64,
    pub flop_ratio: f64,
    /// Analytic ratio for a paper-sized configuration.
    pub paper_scale_ratio: f64,
    /// 2.29 T / 12.26 T from the reference efficiency table.
    pub paper_reported_ratio: f64,
    pub stage1_ms: f64,
    pub joint_ms: f64,
    pub stage2_ms: f64,
    pub time_ratio: f64,
    pub peak_bytes_joint: usize,
    pub peak_bytes_stage2: usize,
}

/// Paper-sized shapes for the analytic FLOP comparison.
pub fn paper_scale_config() -> ModelConfig {
    ModelConfig {
        layers: 24,
        dim: 1024,
        heads: 16,
        mlp_ratio: 4,
        patch: 8,
        registers: 4,
        resolution: 256,
        head_channels: vec![256, 128, 64, 32],
        camera_hidden: 1024,
        sources: 4,
        seed: 0,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const BENCH_WARMUP: usize = 2;

/// Joint forward versus cached query on the same rendered sources. FLOPs are
/// counted by the model; times are medians over `n_queries` after warmup.
pub fn efficiency_bench(model: &Model<f32>, n_queries: usize, seed: u64) -> Result<BenchReport> {
    if n_queries == 0 {
        return Err(IoError::Usage("need at least one query".into()));
    }
    let cfg = model.config();
    let rig = RigConfig { resolution: cfg.resolution, ..RigConfig::default() };
    let examples = scanformer_core::scene::draw_examples(&make_scene(seed), &rig, seed)?;
    let sources = &examples[0].sources;
    let images: Vec<&[f32]> = sources.iter().map(|v| v.rgb.as_slice()).collect();
    let intr = rig.intrinsics();
    let queries = sphere_poses(n_queries + BENCH_WARMUP, 1.0, intr)?;

    let t = Instant::now();
    let stage1 = model.forward_stage1(&images, &intr)?;
    let stage1_ms = t.elapsed().as_secs_f64() * 1e3;

    let (mut joint_ms, mut stage2_ms) = (Vec::new(), Vec::new());
    let (mut joint_flops, mut stage2_flops) = (0, 0);
    let (mut peak_joint, mut peak_stage2) = (0, 0);
    for (i, q) in queries.iter().enumerate() {
        let t = Instant::now();
        let (out, peak) = peak_during(|| model.forward_joint(&images, &intr, q));
        let elapsed = t.elapsed().as_secs_f64() * 1e3;
        joint_flops = out?.flops.total();
        peak_joint = peak_joint.max(peak);
        if i >= BENCH_WARMUP {
            joint_ms.push(elapsed);
        }
        let t = Instant::now();
        let (out, peak) = peak_during(|| model.forward_stage2(q, &stage1.cache));
        let elapsed = t.elapsed().as_secs_f64() * 1e3;
        stage2_flops = out?.1.total();
        peak_stage2 = peak_stage2.max(peak);
        if i >= BENCH_WARMUP {
            stage2_ms.push(elapsed);
        }
    }
    let paper = paper_scale_config();
    let paper_scale_ratio = paper.analytic_flops(4, 1, false).total() as f64 / paper.analytic_flops(4, 1, true).total() as f64;
    let (joint_ms, stage2_ms) = (median(joint_ms), median(stage2_ms));
    Ok(BenchReport {
        n_sources: sources.len(),
        n_queries,
        joint_flops,
        stage2_flops,
        flop_ratio: stage2_flops as f64 / joint_flops as f64,
        paper_scale_ratio,
        paper_reported_ratio: 2.29 / 12.26,
        stage1_ms,
        joint_ms,
        stage2_ms,
        time_ratio: stage2_ms / joint_ms,
        peak_bytes_joint: peak_joint,
        peak_bytes_stage2: peak_stage2,
    })
}
