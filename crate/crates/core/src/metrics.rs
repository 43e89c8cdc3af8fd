//! Evaluation metrics: relative-pose accuracy, depth error, PSNR/SSIM and
//! scan accumulation against a reference surface.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SceneCache;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, CameraPose, PointCloud};
use crate::linalg::{angle_between, deg, Vec3};
use crate::model::{Model, TargetMaps};
use crate::real::Real;
use crate::scene::{examples_from_views, render_rgbd, scene_cameras, ProceduralScene, RenderedView, RigConfig, SOURCES_PER_EXAMPLE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    /// Degrees.
    pub rotation: f64,
    /// Angle between relative translation directions, degrees.
    pub translation: f64,
}

/// Relative-pose errors over all ordered pairs `(i, j)`, `i != j`. The
/// relative motion maps camera `j` coordinates to camera `i` coordinates.
pub fn relative_pose_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<PairError>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted poses for {} ground-truth poses", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::invalid("pose metrics need at least two views"));
    }
    let rel = |p: &[CameraPose], i: usize, j: usize| {
        let ri = p[i].rotation.transpose();
        (ri * p[j].rotation, ri * (p[j].center - p[i].center))
    };
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1));
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if i == j {
                continue;
            }
            let (rg, tg) = rel(gt, i, j);
            let (rp, tp) = rel(pred, i, j);
            out.push(PairError {
                rotation: deg((rg.transpose() * rp).rotation_angle()),
                translation: deg(direction_angle(tg, tp)),
            });
        }
    }
    Ok(out)
}

fn direction_angle(a: Vec3, b: Vec3) -> f64 {
    match (a.norm() > 1e-12, b.norm() > 1e-12) {
        (true, true) => angle_between(a, b),
        (false, false) => 0.0,
        _ => core::f64::consts::FRAC_PI_2,
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Errors within this many degrees of a threshold count as on it, so that
/// round-off in the angle computation cannot flip an exact tie.
pub const ANGLE_TIE_EPS: f64 = 1e-9;

fn below(err: f64, threshold_deg: f64) -> bool {
    err < threshold_deg - ANGLE_TIE_EPS
}

/// `(RA@t, RT@t)` in percent.
pub fn pose_accuracy(errors: &[PairError], threshold_deg: f64) -> (f64, f64) {
    let ra = errors.iter().filter(|e| below(e.rotation, threshold_deg)).count();
    let rt = errors.iter().filter(|e| below(e.translation, threshold_deg)).count();
    (percent(ra, errors.len()), percent(rt, errors.len()))
}

/// Mean over integer thresholds `1..=max_deg` of the percentage of pairs whose
/// larger error is below the threshold.
pub fn pose_auc(errors: &[PairError], max_deg: u32) -> f64 {
    let worst: Vec<f64> = errors.iter().map(|e| e.rotation.max(e.translation)).collect();
    let sum: f64 = (1..=max_deg).map(|t| percent(worst.iter().filter(|&&w| below(w, t as f64)).count(), worst.len())).sum();
    sum / max_deg as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoseMetrics {
    pub ra5: f64,
    pub rt5: f64,
    pub auc30: f64,
}

pub fn pose_metrics(pred: &[CameraPose], gt: &[CameraPose]) -> Result<PoseMetrics> {
    let errors = relative_pose_errors(pred, gt)?;
    let (ra5, rt5) = pose_accuracy(&errors, 5.0);
    Ok(PoseMetrics { ra5, rt5, auc30: pose_auc(&errors, 30) })
}

/// `(Rel, a1)` in percent over masked pixels with positive ground truth.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::shape("depth buffers differ in size"));
    }
    let (mut rel, mut a1, mut n) = (0.0, 0usize, 0usize);
    for i in (0..gt.len()).filter(|&i| mask[i] && gt[i] > 0.0) {
        let (p, g) = (pred[i], gt[i]);
        rel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < 1.25 {
            a1 += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("depth mask selects no pixel"));
    }
    Ok((100.0 * rel / n as f64, percent(a1, n)))
}

/// Camera-space `z` of every point of a world-space point map.
pub fn depth_from_pointmap<T: Real>(pointmap: &[T], pose: &CameraPose) -> Vec<f64> {
    pointmap
        .chunks_exact(3)
        .map(|p| pose.depth_of(Vec3::new(p[0].f64(), p[1].f64(), p[2].f64())))
        .collect()
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("image buffers differ in size"));
    }
    let mse = pred.iter().zip(gt).map(|(&a, &b)| Float::powi(a as f64 - b as f64, 2)).sum::<f64>() / gt.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * Float::log10(1.0 / mse)).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = core::array::from_fn(|i| {
        let x = i as f64 - r;
        Float::exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter of a single-channel image.
fn blur(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + xx + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(y + t) * ow + xx]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over the three
/// channels of `H x W x 3` images with unit dynamic range.
pub fn ssim(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Result<f64> {
    if pred.len() != width * height * 3 || gt.len() != pred.len() {
        return Err(Error::shape("image buffers differ in size"));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = pred.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let b: Vec<f64> = gt.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (ma, mb) = (blur(&a, width, height, &k), blur(&b, width, height, &k));
        let (saa, sbb, sab) =
            (blur(&prod(&a, &a), width, height, &k), blur(&prod(&b, &b), width, height, &k), blur(&prod(&a, &b), width, height, &k));
        let mut acc = 0.0;
        for i in 0..ma.len() {
            let (va, vb, cov) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
            acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        }
        total += acc / ma.len() as f64;
    }
    Ok(total / 3.0)
}

/// `(PSNR, SSIM)`.
pub fn image_metrics(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Result<(f64, f64)> {
    let p = psnr(pred, gt)?;
    let s = ssim(pred, gt, width, height)?;
    Ok((p, s))
}

/// Predicted colours this close to white in every channel count as empty
/// background when scanning.
pub const BACKGROUND_TOLERANCE: f32 = 0.03;

/// Foreground points of one predicted view whose confidence exceeds the
/// `quantile` of the view's foreground confidences (all of them at 0).
pub fn scan_points(maps: &TargetMaps<f32>, quantile: f64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("confidence quantile must lie in [0, 1]"));
    }
    let n = maps.width * maps.height;
    let fg: Vec<usize> = (0..n)
        .filter(|&i| maps.rgb[3 * i..3 * i + 3].iter().any(|&c| c < 1.0 - BACKGROUND_TOLERANCE))
        .filter(|&i| maps.pointmap[3 * i..3 * i + 3].iter().all(|v| v.is_finite()))
        .collect();
    let mut sorted: Vec<f32> = fg.iter().map(|&i| maps.confidence[i]).collect();
    sorted.sort_by(f32::total_cmp);
    let keep = |c: f32| {
        if quantile == 0.0 || sorted.is_empty() {
            return true;
        }
        let at = ((quantile * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
        c > sorted[at]
    };
    let rgb = maps.rgb_unit();
    let mut cloud = PointCloud { points: Vec::new(), colors: Some(Vec::new()), confidences: Some(Vec::new()) };
    for i in fg.into_iter().filter(|&i| keep(maps.confidence[i])) {
        cloud.points.push([maps.pointmap[3 * i], maps.pointmap[3 * i + 1], maps.pointmap[3 * i + 2]]);
        cloud.colors.as_mut().map(|c| c.push([rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]]));
        cloud.confidences.as_mut().map(|c| c.push(maps.confidence[i]));
    }
    Ok(cloud)
}

/// Queries every pose against a sealed scene cache, merges the filtered
/// point maps and scores the result against `reference` surface samples.
pub fn scan_and_chamfer(
    model: &Model<f32>,
    cache: &SceneCache<f32>,
    query_poses: &[CameraPose],
    quantile: f64,
    reference: &[[f32; 3]],
) -> Result<(PointCloud, f64)> {
    let mut merged = PointCloud { points: Vec::new(), colors: Some(Vec::new()), confidences: Some(Vec::new()) };
    for pose in query_poses {
        let (maps, _) = model.forward_stage2(pose, cache)?;
        merged.extend(&scan_points(&maps, quantile)?);
    }
    if merged.is_empty() {
        return Err(Error::invalid("confidence threshold removed every point"));
    }
    let cd = chamfer_points(&merged.points, reference)?;
    Ok((merged, cd))
}

/// Aggregated evaluation over held-out scenes. Percentages lie in `[0, 100]`.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub scenes: usize,
    pub ra5: f64,
    pub rt5: f64,
    pub ra15: f64,
    pub auc30: f64,
    pub source_rel: f64,
    pub source_a1: f64,
    pub novel_rel: f64,
    pub novel_a1: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of predicting every target as the mean source colour.
    pub baseline_psnr: f64,
    pub chamfer: f64,
    /// Degrees between the first predicted rotation and identity.
    pub first_rotation_err: f64,
    /// Distance between the first predicted center and `(0, 0, -1)`.
    pub first_center_err: f64,
}

impl EvalReport {
    /// Column order of the CSV export.
    pub const COLUMNS: [&'static str; 15] = [
        "scenes", "RA@5", "RT@5", "RA@15", "AUC@30", "src_Rel", "src_a1", "nv_Rel", "nv_a1", "PSNR", "SSIM", "baseline_PSNR", "CD",
        "first_rot_deg", "first_center",
    ];

    pub fn values(&self) -> [f64; 15] {
        [
            self.scenes as f64,
            self.ra5,
            self.rt5,
            self.ra15,
            self.auc30,
            self.source_rel,
            self.source_a1,
            self.novel_rel,
            self.novel_a1,
            self.psnr,
            self.ssim,
            self.baseline_psnr,
            self.chamfer,
            self.first_rotation_err,
            self.first_center_err,
        ]
    }
}

/// Per-scene evaluation under the 4-source / N-target protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub pose_errors: Vec<PairError>,
    pub source_depth: Vec<(f64, f64)>,
    pub novel_depth: Vec<(f64, f64)>,
    pub images: Vec<(f64, f64)>,
    pub baseline_psnr: Vec<f64>,
    pub chamfer: f64,
    pub first_rotation_err: f64,
    pub first_center_err: f64,
}

/// Surface samples per scene for the Chamfer reference.
pub const REFERENCE_SAMPLES: usize = 4096;

/// Picks `4 + n_targets` distinct rig views, predicts from the first four and
/// scores poses, source and novel depth, novel images and the accumulated
/// novel-view point cloud. Everything is expressed in the frame normalised by
/// the first source view.
pub fn evaluate_scene(model: &Model<f32>, scene: &ProceduralScene, rig: &RigConfig, seed: u64, n_targets: usize) -> Result<SceneEval> {
    let cams = scene_cameras(scene.seed, rig)?;
    let need = SOURCES_PER_EXAMPLE + n_targets;
    if cams.len() < need {
        return Err(Error::invalid(format!("rig has {} views, evaluation needs {need}", cams.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..cams.len()).collect();
    for i in 0..need {
        let j = rng.random_range(i..cams.len());
        idx.swap(i, j);
    }
    let selected = idx[..need]
        .iter()
        .map(|&i| render_rgbd(scene, &cams[i], rig.samples_per_pixel))
        .collect::<Result<Vec<_>>>()?;
    let examples = examples_from_views(&selected)?;
    let sources = &examples[0].sources;
    let images: Vec<&[f32]> = sources.iter().map(|v| v.rgb.as_slice()).collect();
    let intr = sources[0].pose.intrinsics;
    let stage1 = model.forward_stage1(&images, &intr)?;
    let gt_poses: Vec<CameraPose> = sources.iter().map(|v| v.pose).collect();
    let pose_errors = relative_pose_errors(&stage1.poses, &gt_poses)?;
    let first = stage1.poses[0];
    let first_rotation_err = deg(first.rotation.rotation_angle());
    let first_center_err = (first.center - Vec3::new(0.0, 0.0, -1.0)).norm();

    let depth_of = |view: &RenderedView| -> Result<(f64, f64)> {
        let (maps, _) = model.forward_stage2(&view.pose, &stage1.cache)?;
        let pred = depth_from_pointmap(&maps.pointmap, &view.pose);
        let gt: Vec<f64> = view.depth.iter().map(|&d| d as f64).collect();
        depth_metrics(&pred, &gt, &view.mask)
    };
    let source_depth = sources.iter().map(depth_of).collect::<Result<Vec<_>>>()?;

    let mut mean = [0.0f64; 3];
    for v in sources.iter() {
        for (i, c) in v.rgb.iter().enumerate() {
            mean[i % 3] += *c as f64;
        }
    }
    let count = (sources.len() * intr.pixel_count()) as f64;
    let mean = mean.map(|m| (m / count) as f32);

    let (mut novel_depth, mut imgs, mut baseline_psnr) = (Vec::new(), Vec::new(), Vec::new());
    let mut cloud = Vec::new();
    for ex in &examples {
        let t = &ex.target;
        let (maps, _) = model.forward_stage2(&t.pose, &stage1.cache)?;
        imgs.push(image_metrics(&maps.rgb_unit(), &t.rgb, t.width(), t.height())?);
        let flat: Vec<f32> = (0..t.rgb.len()).map(|i| mean[i % 3]).collect();
        baseline_psnr.push(psnr(&flat, &t.rgb)?);
        let pred = depth_from_pointmap(&maps.pointmap, &t.pose);
        let gt: Vec<f64> = t.depth.iter().map(|&d| d as f64).collect();
        if t.mask.iter().any(|&m| m) {
            novel_depth.push(depth_metrics(&pred, &gt, &t.mask)?);
        }
        cloud.extend(scan_points(&maps, 0.0)?.points);
    }
    let sim = examples[0].similarity;
    let reference: Vec<[f32; 3]> = scene
        .sample_surface(REFERENCE_SAMPLES, seed)
        .into_iter()
        .map(|p| sim.apply_point(Vec3::from_f32(p)).to_f32())
        .collect();
    let chamfer = if cloud.is_empty() { f64::INFINITY } else { chamfer_points(&cloud, &reference)? };
    Ok(SceneEval {
        pose_errors,
        source_depth,
        novel_depth,
        images: imgs,
        baseline_psnr,
        chamfer,
        first_rotation_err,
        first_center_err,
    })
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Pose accuracies pool every pair of every scene; other fields average
    /// per view (depth, images) or per scene (Chamfer, first-view errors).
    pub fn aggregate(scenes: &[SceneEval]) -> EvalReport {
        let pairs: Vec<PairError> = scenes.iter().flat_map(|s| s.pose_errors.iter().copied()).collect();
        let (ra5, rt5) = pose_accuracy(&pairs, 5.0);
        let (ra15, _) = pose_accuracy(&pairs, 15.0);
        EvalReport {
            scenes: scenes.len(),
            ra5,
            rt5,
            ra15,
            auc30: pose_auc(&pairs, 30),
            source_rel: mean_of(scenes.iter().flat_map(|s| s.source_depth.iter().map(|d| d.0))),
            source_a1: mean_of(scenes.iter().flat_map(|s| s.source_depth.iter().map(|d| d.1))),
            novel_rel: mean_of(scenes.iter().flat_map(|s| s.novel_depth.iter().map(|d| d.0))),
            novel_a1: mean_of(scenes.iter().flat_map(|s| s.novel_depth.iter().map(|d| d.1))),
            psnr: mean_of(scenes.iter().flat_map(|s| s.images.iter().map(|d| d.0))),
            ssim: mean_of(scenes.iter().flat_map(|s| s.images.iter().map(|d| d.1))),
            baseline_psnr: mean_of(scenes.iter().flat_map(|s| s.baseline_psnr.iter().copied())),
            chamfer: mean_of(scenes.iter().map(|s| s.chamfer)),
            first_rotation_err: mean_of(scenes.iter().map(|s| s.first_rotation_err)),
            first_center_err: mean_of(scenes.iter().map(|s| s.first_center_err)),
        }
    }
}
