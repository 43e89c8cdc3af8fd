//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any fails.
//!
//! The desk training run is cached under the cargo target directory, keyed
//! by a hash of the training config. Delete `target/tmp/acceptance` to force
//! a fresh run.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use oracles::{brute_chamfer, dense_attention, dense_frame_mask, dense_global_mask, depth_oracle, direct_ssim, Lcg};
use scanformer::checkpoint::Checkpoint;
use scanformer::dataset::PoseJson;
use scanformer::evaluation::{efficiency_bench, evaluate_held_out};
use scanformer::image_io::encode_png;
use scanformer::ply;
use scanformer::rngt::{Container, Tensor};
use scanformer::service::{router, AppState, ServiceConfig, SessionInfo};
use scanformer::training::{run, RunOptions, Trainer};
use scanformer_core::attention::{scaled_attention, AttentionKind, MaskMode, TokenLayout, ViewRole};
use scanformer_core::geometry::{
    chamfer_points, normalize_cameras, plucker_map, recover_up_direction, CameraPose, Intrinsics, PointCloud, Similarity,
};
use scanformer_core::linalg::{deg, rad, Mat3, Vec3};
use scanformer_core::losses::{
    camera_loss, camera_loss_backward, pointmap_loss, pointmap_loss_backward, rgb_loss, rgb_loss_backward, PerceptualBank,
    PointmapInputs,
};
use scanformer_core::metrics::ssim;
use scanformer_core::model::{pose_to_raw, Model, ModelConfig};
use scanformer_core::scene::{draw_examples, make_scene, render_rgbd, scene_cameras, RigConfig};
use scanformer_core::train::TrainConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn max_abs64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_images(rng: &mut Lcg, cfg: &ModelConfig) -> Vec<Vec<f32>> {
    (0..cfg.sources).map(|_| (0..cfg.pixels() * 3).map(|_| rng.next_f64() as f32).collect()).collect()
}

fn random_pose(rng: &mut Lcg, k: Intrinsics) -> CameraPose {
    loop {
        let d = Vec3::new(rng.sym(), rng.sym(), rng.sym());
        if d.norm() > 0.2 {
            let up = Vec3::new(0.3 * rng.sym(), -1.0, 0.3 * rng.sym());
            return CameraPose::look_at(d.normalize() * (0.6 + 1.4 * rng.next_f64()), Vec3::ZERO, up, Vec3::X, k).unwrap();
        }
    }
}

/// Desk-sized model with weights moved away from their initialisation.
fn perturbed(seed: u64, rng: &mut Lcg) -> Model<f32> {
    let mut m = Model::new(ModelConfig { seed, ..ModelConfig::default() }).unwrap();
    for p in m.params_mut() {
        *p = *p * 1.5 + 0.02 * rng.sym() as f32;
    }
    m
}

fn desk_intrinsics() -> Intrinsics {
    let r = ModelConfig::default().resolution;
    Intrinsics::from_fov(r, r, 60.0)
}

fn causal_independence() -> Outcome {
    let mut rng = Lcg(101);
    let k = desk_intrinsics();
    let mut worst = 0.0f64;
    for draw in 0..50u64 {
        let model = perturbed(draw, &mut rng);
        let imgs = random_images(&mut rng, model.config());
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        let alone = model.forward_multi(&refs, &k, &[]).unwrap();
        let joint = model.forward_joint(&refs, &k, &random_pose(&mut rng, k)).unwrap();
        let n = alone.tokens.len();
        worst = worst.max(max_abs(&alone.tokens, &joint.tokens[..n]));
        for (a, b) in alone.raw_poses.iter().zip(&joint.raw_poses) {
            worst = worst.max(max_abs(a, b));
        }
        for (a, b) in alone.poses.iter().zip(&joint.poses) {
            let (ra, rb) = (a.rotation.to_row_array(), b.rotation.to_row_array());
            worst = worst.max(max_abs64(&ra, &rb)).max(max_abs64(&a.center.0, &b.center.0));
        }
    }
    outcome(worst <= 1e-5, format!("50 draws, max |source diff| {worst:.2e} (tol 1e-5)"))
}

fn kv_cache_equivalence() -> Outcome {
    let mut rng = Lcg(202);
    let k = desk_intrinsics();
    let model = perturbed(7, &mut rng);
    let imgs = random_images(&mut rng, model.config());
    let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
    let stage1 = model.forward_stage1(&refs, &k).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pose = random_pose(&mut rng, k);
        let (cached, _) = model.forward_stage2(&pose, &stage1.cache).unwrap();
        let joint = model.forward_joint(&refs, &k, &pose).unwrap().target;
        worst = worst
            .max(max_abs(&cached.rgb, &joint.rgb))
            .max(max_abs(&cached.pointmap, &joint.pointmap))
            .max(max_abs(&cached.confidence, &joint.confidence));
    }
    outcome(worst <= 1e-4, format!("20 poses, max |cached - joint| {worst:.2e} (tol 1e-4)"))
}

fn efficiency() -> Outcome {
    let cfg = ModelConfig::default();
    let analytic = cfg.analytic_flops(4, 1, false).total() as f64 / cfg.analytic_flops(4, 1, true).total() as f64;
    let model = Model::<f32>::new(cfg).unwrap();
    let b = efficiency_bench(&model, 20, 0).unwrap();
    outcome(
        analytic < 0.33 && b.time_ratio <= 0.6,
        format!(
            "analytic FLOP ratio {analytic:.3} (< 0.33), counted {:.3}, median time {:.2} ms / {:.2} ms = {:.3} (<= 0.6)",
            b.flop_ratio, b.stage2_ms, b.joint_ms, b.time_ratio
        ),
    )
}

const FD_STEP: f64 = 1e-5;

fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + FD_STEP;
            let fp = f(&x);
            x[i] = x0 - FD_STEP;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error with a floor of 1e-4 on the denominator, so that
/// coordinates whose true gradient is zero are compared absolutely.
fn worst_rel(fd: &[f64], an: &[f64]) -> f64 {
    fd.iter().zip(an).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4)).fold(0.0, f64::max)
}

fn unit_pose(rng: &mut Lcg) -> CameraPose {
    let a = Vec3::new(rng.sym(), rng.sym(), rng.sym()).normalize();
    let angle = 3.0 * rng.sym();
    CameraPose::new(Mat3::axis_angle(a, angle), Vec3::new(2.0 * rng.sym(), 2.0 * rng.sym(), 2.0 * rng.sym()), Intrinsics::from_fov(8, 8, 60.0))
}

fn gradient_suite() -> Outcome {
    let mut rng = Lcg(303);
    let (mut rgb, mut pm, mut cam) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..10u64 {
        let (w, h) = (4 + (rng.next_f64() * 5.0) as usize, 4 + (rng.next_f64() * 5.0) as usize);
        let bank = PerceptualBank::new(case);
        let pred: Vec<f64> = (0..w * h * 3).map(|_| rng.next_f64()).collect();
        let gt: Vec<f64> = (0..w * h * 3).map(|_| rng.next_f64()).collect();
        let mut an = vec![0.0; pred.len()];
        rgb_loss_backward(&pred, &gt, w, h, &bank, 1.0, 0.5, &mut an).unwrap();
        let fd = numeric_grad(&pred, |p| {
            let (m, q) = rgb_loss(p, &gt, w, h, &bank).unwrap();
            m + 0.5 * q
        });
        rgb = rgb.max(worst_rel(&fd, &an));
    }
    for _ in 0..10 {
        let (w, h) = (3 + (rng.next_f64() * 4.0) as usize, 3 + (rng.next_f64() * 4.0) as usize);
        let n = w * h;
        let pred = rng.vec(3 * n, 1.0);
        let gt = rng.vec(3 * n, 1.0);
        let conf: Vec<f64> = (0..n).map(|_| 0.5 + 2.5 * rng.next_f64()).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.75).collect();
        let p = PointmapInputs { width: w, height: h, pred: &pred, gt: &gt, confidence: &conf, mask: &mask };
        let (mut dp, mut dc) = (vec![0.0; pred.len()], vec![0.0; n]);
        pointmap_loss_backward(&p, 0.2, 1.0, &mut dp, &mut dc).unwrap();
        let fd_p = numeric_grad(&pred, |x| pointmap_loss(&PointmapInputs { pred: x, ..p }, 0.2).unwrap());
        let fd_c = numeric_grad(&conf, |x| pointmap_loss(&PointmapInputs { confidence: x, ..p }, 0.2).unwrap());
        pm = pm.max(worst_rel(&fd_p, &dp)).max(worst_rel(&fd_c, &dc));
    }
    for _ in 0..10 {
        let n = 1 + (rng.next_f64() * 4.0) as usize;
        let gt: Vec<CameraPose> = (0..n).map(|_| unit_pose(&mut rng)).collect();
        let pred: Vec<[f64; 9]> = gt
            .iter()
            .map(|g| {
                let r = pose_to_raw(g);
                std::array::from_fn(|e| r[e] + 0.3 * rng.sym())
            })
            .collect();
        let mut an = vec![[0.0; 9]; n];
        camera_loss_backward(&pred, &gt, 0.1, 1.0, &mut an).unwrap();
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let fd = numeric_grad(&flat, |x| {
            let p: Vec<[f64; 9]> = x.chunks(9).map(|c| c.try_into().unwrap()).collect();
            camera_loss(&p, &gt, 0.1).unwrap()
        });
        cam = cam.max(worst_rel(&fd, &an.concat()));
    }
    let worst = rgb.max(pm).max(cam);
    outcome(worst <= 1e-3, format!("max rel err rgb {rgb:.1e}, pointmap {pm:.1e}, camera {cam:.1e} (tol 1e-3)"))
}

fn oracle_equivalences() -> Outcome {
    let mut rng = Lcg(404);
    let mut attn = 0.0f64;
    for case in 0..60u64 {
        let n_src = 1 + (case % 3) as usize;
        let mut views: Vec<(ViewRole, usize)> = (0..n_src).map(|_| (ViewRole::Source, 1 + (rng.next_f64() * 3.0) as usize)).collect();
        for _ in 0..(case % 3) {
            views.push((ViewRole::Target, 1 + (rng.next_f64() * 3.0) as usize));
        }
        let heads = 1 + (case % 2) as usize;
        let dim = 4 * heads;
        for mode in [MaskMode::SingleTarget, MaskMode::MultiTarget] {
            let Ok(layout) = TokenLayout::new(&views, mode) else { continue };
            let n = layout.len();
            let (q, k, v) = (rng.vec(n * dim, 2.0), rng.vec(n * dim, 2.0), rng.vec(n * dim, 1.0));
            for (kind, mask) in [(AttentionKind::Global, dense_global_mask(&layout)), (AttentionKind::Frame, dense_frame_mask(&layout))] {
                let got = scaled_attention(&q, &k, &v, &layout, kind, dim, heads).unwrap();
                attn = attn.max(max_abs64(&got, &dense_attention(&q, &k, &v, n, dim, heads, &mask)));
            }
        }
    }

    let mut chamfer_exact = true;
    for _ in 0..20 {
        let a: Vec<[f32; 3]> = (0..64).map(|_| [rng.sym() as f32, rng.sym() as f32, rng.sym() as f32]).collect();
        let b: Vec<[f32; 3]> = (0..64).map(|_| [rng.sym() as f32, 0.5 * rng.sym() as f32, rng.sym() as f32]).collect();
        chamfer_exact &= chamfer_points(&a, &b).unwrap() == brute_chamfer(&a, &b);
    }

    let mut ssim_err = 0.0f64;
    for (w, h) in [(11, 11), (16, 16), (23, 14), (64, 64)] {
        let a: Vec<f32> = (0..w * h * 3).map(|_| rng.next_f64() as f32).collect();
        let b: Vec<f32> = a.iter().map(|v| (v + 0.2 * (rng.next_f64() as f32 - 0.5)).clamp(0.0, 1.0)).collect();
        ssim_err = ssim_err.max((ssim(&a, &b, w, h).unwrap() - direct_ssim(&a, &b, w, h)).abs());
    }

    let rig = RigConfig { resolution: 48, views_per_scene: 6, ..RigConfig::default() };
    let (mut depth_err, mut coverage_ok, mut hits) = (0.0f64, true, 0usize);
    for seed in 0..12 {
        let scene = make_scene(seed);
        for pose in scene_cameras(seed, &rig).unwrap() {
            let view = render_rgbd(&scene, &pose, 1).unwrap();
            for (&got, &want) in view.depth.iter().zip(&depth_oracle(&scene, &pose)) {
                coverage_ok &= (got > 0.0) == (want > 0.0);
                depth_err = depth_err.max((got as f64 - want).abs());
                hits += usize::from(want > 0.0);
            }
        }
    }
    let pass = attn <= 1e-6 && chamfer_exact && ssim_err <= 1e-6 && depth_err <= 1e-6 && coverage_ok;
    outcome(
        pass,
        format!(
            "attention {attn:.1e}, chamfer exact {chamfer_exact}, SSIM {ssim_err:.1e}, depth {depth_err:.1e} over {hits} hits (tol 1e-6)"
        ),
    )
}

fn geometry_suite() -> Outcome {
    let mut rng = Lcg(505);
    let k = Intrinsics::from_fov(24, 18, 55.0);
    let (mut idempotent, mut canonical) = (true, true);
    let (mut plucker, mut round_trip) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 1 + (rng.next_f64() * 5.0) as usize;
        let poses: Vec<CameraPose> = (0..n)
            .map(|_| {
                let a = Vec3::new(rng.sym(), rng.sym(), rng.sym()).normalize();
                let c = Vec3::new(2.0 * rng.sym(), 2.0 * rng.sym(), 2.0 * rng.sym() + 2.5);
                CameraPose::new(Mat3::axis_angle(a, 3.0 * rng.sym()), c, k)
            })
            .collect();
        let (once, _) = normalize_cameras(&poses).unwrap();
        let (twice, sim) = normalize_cameras(&once).unwrap();
        canonical &= once[0].is_canonical() && twice[0].is_canonical();
        idempotent &= sim.is_identity() && once == twice;
        for p in &poses {
            let map = plucker_map(p).unwrap();
            for (d, m) in map.directions.iter().zip(&map.moments) {
                plucker = plucker.max((d.norm() - 1.0).abs()).max(d.dot(*m).abs());
            }
            let (x, y, z) = (24.0 * rng.next_f64(), 18.0 * rng.next_f64(), 0.05 + 20.0 * rng.next_f64());
            let point = p.center + p.rotation.mul_vec(k.unproject(x, y)) * z;
            let (u, v) = p.project(point).unwrap();
            round_trip = round_trip.max((u - x).abs()).max((v - y).abs());
        }
    }

    let kk = Intrinsics::from_fov(16, 16, 60.0);
    let poses: Vec<CameraPose> = [(0.4, 0.1), (1.7, -0.4), (2.9, 0.3), (-1.1, 0.6), (-2.4, -0.2)]
        .iter()
        .map(|&(az, el): &(f64, f64)| {
            let c = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()) * 2.0;
            CameraPose::look_at(c, Vec3::ZERO, Vec3::Y, Vec3::X, kk).unwrap()
        })
        .collect();
    let roll = Similarity { scale: 1.0, rotation: Mat3::rot_x(rad(17.0)), translation: Vec3::ZERO };
    let moved: Vec<CameraPose> = poses.iter().map(|p| roll.apply_pose(p)).collect();
    let up = recover_up_direction(&moved).unwrap();
    let roll_err = (deg(up.angle) + 17.0).abs();

    let pass = idempotent && canonical && plucker <= 1e-6 && roll_err <= 0.5 && round_trip <= 1e-4;
    outcome(
        pass,
        format!(
            "idempotent {idempotent}, canonical bit-exact {canonical}, Plücker {plucker:.1e} (tol 1e-6), 17° roll error {roll_err:.3}° (tol 0.5°), round trip {round_trip:.1e} px (tol 1e-4)"
        ),
    )
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Trains the desk config, or loads an earlier run of the same config.
/// Returns the model and the wall-clock training time in seconds.
fn desk_model(cfg: &TrainConfig) -> (Model<f32>, f64, bool) {
    let text = serde_json::to_string(cfg).unwrap();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    text.hash(&mut h);
    let key = format!("{:016x}", h.finish());
    let dir = cache_dir();
    let (ckpt, meta) = (dir.join(format!("desk-{key}.rngt")), dir.join(format!("desk-{key}.json")));
    if let (Ok(c), Ok(m)) = (Checkpoint::load(&ckpt, Some(&cfg.model)), std::fs::read(&meta)) {
        let m: Value = serde_json::from_slice(&m).unwrap();
        if m["steps"] == cfg.steps {
            return (c.model, m["train_seconds"].as_f64().unwrap(), true);
        }
    }
    std::fs::create_dir_all(&dir).unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let t = Instant::now();
    let log = dir.join(format!("desk-{key}.jsonl"));
    let _ = std::fs::remove_file(&log);
    run(&mut trainer, &RunOptions { out: None, log: Some(log), stop_at: None }).unwrap();
    let secs = t.elapsed().as_secs_f64();
    Checkpoint::weights_only(trainer.model.clone()).save(&ckpt).unwrap();
    std::fs::write(&meta, serde_json::to_vec(&json!({"steps": cfg.steps, "train_seconds": secs})).unwrap()).unwrap();
    (trainer.model, secs, false)
}

fn desk_training() -> Outcome {
    let cfg = TrainConfig::default();
    let (model, secs, cached) = desk_model(&cfg);
    let (r, _) = evaluate_held_out(&model, &cfg, 50, 0).unwrap();
    let checks = [
        (secs <= 1800.0, format!("train {:.1} min{} (<= 30)", secs / 60.0, if cached { " cached" } else { "" })),
        (r.psnr >= r.baseline_psnr + 4.0, format!("PSNR {:.2} vs baseline {:.2} + 4", r.psnr, r.baseline_psnr)),
        (r.source_rel <= 15.0, format!("source Rel {:.2}% (<= 15)", r.source_rel)),
        (r.ra15 >= 80.0, format!("RA@15 {:.1}% (>= 80)", r.ra15)),
        (
            r.first_rotation_err <= 5.0 && r.first_center_err <= 0.05,
            format!("first view {:.2}° / {:.4} (<= 5° / 0.05)", r.first_rotation_err, r.first_center_err),
        ),
    ];
    let mut detail = format!("{} steps, {} scenes held out: ", cfg.steps, r.scenes);
    for (i, (ok, text)) in checks.iter().enumerate() {
        let _ = write!(detail, "{}{}{}", if i > 0 { ", " } else { "" }, if *ok { "" } else { "[fail] " }, text);
    }
    outcome(checks.iter().all(|c| c.0), detail)
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        steps: 40,
        warmup: 4,
        peak_lr: 3e-3,
        checkpoint_interval: 0,
        model: ModelConfig {
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
        },
        rig: RigConfig { resolution: 16, views_per_scene: 14, ..RigConfig::default() },
        dataset_size: 8,
        ..TrainConfig::default()
    }
}

fn format_round_trips(rng: &mut Lcg) -> bool {
    let mut ok = true;
    for case in 0..30 {
        let tensors: Vec<Tensor> = (0..1 + case % 4)
            .map(|i| {
                let dims = vec![1 + (rng.next_f64() * 5.0) as usize, 1 + (rng.next_f64() * 4.0) as usize];
                let data = (0..dims[0] * dims[1]).map(|_| (rng.sym() * 1e3) as f32).collect();
                Tensor::new(format!("t{i}"), &dims, data).unwrap()
            })
            .collect();
        let c = Container::new(tensors, &json!({"case": case})).unwrap();
        let bytes = c.to_bytes().unwrap();
        ok &= Container::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;

        let n = (rng.next_f64() * 50.0) as usize;
        let cloud = PointCloud {
            points: (0..n).map(|_| [rng.sym() as f32, rng.sym() as f32, rng.sym() as f32]).collect(),
            colors: (case % 2 == 0).then(|| (0..n).map(|_| [rng.next_f64() as f32; 3]).collect()),
            confidences: (case % 3 == 0).then(|| (0..n).map(|_| rng.next_f64() as f32).collect()),
        };
        let bytes = ply::to_bytes(&cloud).unwrap();
        ok &= ply::to_bytes(&ply::from_bytes(&bytes).unwrap()).unwrap() == bytes;
    }
    ok
}

fn resume_is_exact() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.rngt");
    let cfg = tiny_train();
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let all = run(&mut straight, &RunOptions { stop_at: Some(10), ..RunOptions::default() }).unwrap();
    let mut ok = true;
    for stop in [5u64, 6] {
        let mut first = Trainer::new(cfg.clone()).unwrap();
        run(&mut first, &RunOptions { out: Some(path.clone()), stop_at: Some(stop), ..RunOptions::default() }).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(&path, None).unwrap()).unwrap();
        let next = run(&mut resumed, &RunOptions { stop_at: Some(stop + 1), ..RunOptions::default() }).unwrap();
        ok &= next[0].total.to_bits() == all[stop as usize].total.to_bits();
    }
    ok
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |v| Body::from(serde_json::to_vec(&v).unwrap()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

/// Returns (hash unchanged over 100 renders, concurrent equals sequential).
async fn service_checks() -> (bool, bool) {
    let cfg = tiny_train();
    let app = router(AppState::new(Model::new(cfg.model.clone()).unwrap(), ServiceConfig::default()));
    let ex = draw_examples(&make_scene(3), &cfg.rig, 3).unwrap();
    let images: Vec<String> = ex[0].sources.iter().map(|v| B64.encode(encode_png(16, 16, &v.rgb).unwrap())).collect();
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "images": images }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let info: SessionInfo = serde_json::from_slice(&body).unwrap();
    let uri = format!("/sessions/{}/render", info.id);
    let k = Intrinsics::from_fov(16, 16, 60.0);
    let pose = |i: usize| {
        let a = i as f64 * 0.61;
        let c = Vec3::new(a.sin(), 0.4 * a.cos(), -a.cos());
        json!({ "pose": PoseJson::from_pose(&CameraPose::look_at(c, Vec3::ZERO, Vec3::new(0.0, -1.0, 0.0), Vec3::X, k).unwrap()) })
    };
    let mut all_ok = true;
    for i in 0..100 {
        all_ok &= call(&app, "POST", &uri, Some(pose(i))).await.0 == StatusCode::OK;
    }
    let (_, body) = call(&app, "GET", &format!("/sessions/{}", info.id), None).await;
    let after: SessionInfo = serde_json::from_slice(&body).unwrap();
    let hash_ok = all_ok && after.cache_hash == info.cache_hash;

    let mut sequential = Vec::new();
    for i in 0..8 {
        sequential.push(call(&app, "POST", &uri, Some(pose(i))).await);
    }
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let (app, uri, body) = (app.clone(), uri.clone(), pose(i));
            tokio::spawn(async move { call(&app, "POST", &uri, Some(body)).await })
        })
        .collect();
    let mut same = true;
    for (h, want) in handles.into_iter().zip(&sequential) {
        same &= &h.await.unwrap() == want;
    }
    (hash_ok, same)
}

fn formats_and_service() -> Outcome {
    let formats = format_round_trips(&mut Lcg(606));
    let resume = resume_is_exact();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let (hash, concurrent) = rt.block_on(service_checks());
    outcome(
        formats && resume && hash && concurrent,
        format!(
            "RNGT/PLY byte-identical {formats}, resume next-step loss exact {resume}, cache hash stable over 100 renders {hash}, concurrent == sequential {concurrent}"
        ),
    )
}

fn main() -> ExitCode {
    // Harness flags such as `--nocapture` are ignored; other arguments
    // select criteria by substring.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("causal independence", causal_independence, Some(Duration::from_secs(60))),
        ("KV-cache equivalence", kv_cache_equivalence, Some(Duration::from_secs(60))),
        ("efficiency", efficiency, Some(Duration::from_secs(120))),
        ("gradient suite", gradient_suite, Some(Duration::from_secs(120))),
        ("oracle equivalences", oracle_equivalences, None),
        ("geometry suite", geometry_suite, None),
        ("desk-scale training", desk_training, None),
        ("formats & service", formats_and_service, None),
    ];
    let (mut failed, mut ran) = (0, 0);
    for (name, f, budget) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if let Some(limit) = budget {
            if took > limit {
                o.pass = false;
                o.detail.push_str(&format!(", [fail] runtime over {} s", limit.as_secs()));
            }
        }
        failed += usize::from(!o.pass);
        println!("{} {name}: {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
