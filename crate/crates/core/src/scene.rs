//! Procedural object scenes, look-at camera rigs, an analytic RGBD ray
//! caster, and training-batch formation.
//!
//! Scenes are unions of spheres, axis-aligned boxes and y-aligned capped
//! cylinders that fit inside the unit ball. World up is `+y`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{normalize_cameras, CameraPose, Intrinsics, Similarity};
use crate::linalg::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Box { half: Vec3 },
    /// Capped cylinder with its axis along world `y`.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: [f32; 3],
}

/// Ray hit: `t` along the (unnormalised) ray direction and the outward normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    pub fn kind(&self) -> ShapeKind {
        match self.shape {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
        }
    }

    /// Radius of the smallest origin-centred ball around the primitive's own
    /// center that contains it.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => Float::sqrt(radius * radius + half_height * half_height),
        }
    }

    pub fn is_valid(&self) -> bool {
        let positive = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half } => half.0.iter().all(|h| *h > 0.0),
            Shape::Cylinder { radius, half_height } => radius > 0.0 && half_height > 0.0,
        };
        positive && self.center.is_finite() && self.albedo.iter().all(|a| (0.0..=1.0).contains(a))
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let o = origin - self.center;
        match self.shape {
            Shape::Sphere { radius } => {
                let a = dir.dot(dir);
                let b = o.dot(dir);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = Float::sqrt(disc);
                let mut t = (-b - sq) / a;
                if t <= HIT_EPS {
                    t = (-b + sq) / a;
                }
                (t > HIT_EPS).then(|| Hit { t, normal: (o + dir * t).normalize() })
            }
            Shape::Box { half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-300 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (t0, t1) = {
                        let t0 = (-half[a] - o[a]) * inv;
                        let t1 = (half[a] - o[a]) * inv;
                        if t0 < t1 { (t0, t1) } else { (t1, t0) }
                    };
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = a;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = a;
                    }
                }
                if t_far < t_near || t_far <= HIT_EPS {
                    return None;
                }
                let (t, axis) = if t_near > HIT_EPS { (t_near, near_axis) } else { (t_far, far_axis) };
                let p = o + dir * t;
                let mut n = Vec3::ZERO;
                n.0[axis] = if p[axis] > 0.0 { 1.0 } else { -1.0 };
                Some(Hit { t, normal: n })
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<Hit> = None;
                let mut consider = |t: f64, normal: Vec3| {
                    if t > HIT_EPS && best.is_none_or(|b| t < b.t) {
                        best = Some(Hit { t, normal });
                    }
                };
                let a = dir.x() * dir.x() + dir.z() * dir.z();
                if a > 1e-300 {
                    let b = o.x() * dir.x() + o.z() * dir.z();
                    let c = o.x() * o.x() + o.z() * o.z() - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = Float::sqrt(disc);
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let p = o + dir * t;
                            if p.y().abs() <= half_height {
                                consider(t, Vec3::new(p.x(), 0.0, p.z()).normalize());
                            }
                        }
                    }
                }
                if dir.y().abs() > 1e-300 {
                    for (cap, ny) in [(half_height, 1.0), (-half_height, -1.0)] {
                        let t = (cap - o.y()) / dir.y();
                        let p = o + dir * t;
                        if p.x() * p.x() + p.z() * p.z() <= radius * radius {
                            consider(t, Vec3::new(0.0, ny, 0.0));
                        }
                    }
                }
                best
            }
        }
    }

    /// Whether `p` lies inside the primitive by more than `margin`.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let o = p - self.center;
        match self.shape {
            Shape::Sphere { radius } => o.norm() < radius - margin,
            Shape::Box { half } => (0..3).all(|a| o[a].abs() < half[a] - margin),
            Shape::Cylinder { radius, half_height } => {
                Float::sqrt(o.x() * o.x() + o.z() * o.z()) < radius - margin && o.y().abs() < half_height - margin
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        use core::f64::consts::PI;
        match self.shape {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half } => 8.0 * (half.x() * half.y() + half.y() * half.z() + half.x() * half.z()),
            Shape::Cylinder { radius, half_height } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
        }
    }

    /// Unsigned distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let o = p - self.center;
        match self.shape {
            Shape::Sphere { radius } => (o.norm() - radius).abs(),
            Shape::Box { half } => {
                let q: [f64; 3] = core::array::from_fn(|a| o[a].abs() - half[a]);
                let outside = Vec3(core::array::from_fn(|a| q[a].max(0.0))).norm();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Shape::Cylinder { radius, half_height } => {
                let dr = Float::sqrt(o.x() * o.x() + o.z() * o.z()) - radius;
                let dy = o.y().abs() - half_height;
                let outside = Float::sqrt(dr.max(0.0).powi(2) + dy.max(0.0).powi(2));
                let inside = dr.max(dy).min(0.0);
                (outside + inside).abs()
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        use core::f64::consts::PI;
        let local = match self.shape {
            Shape::Sphere { radius } => unit_vector(rng) * radius,
            Shape::Box { half } => {
                let areas = [half.y() * half.z(), half.x() * half.z(), half.x() * half.y()];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let mut p = Vec3(core::array::from_fn(|a| (rng.random::<f64>() * 2.0 - 1.0) * half[a]));
                p.0[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
                p
            }
            Shape::Cylinder { radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                let theta = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (side + caps) < side {
                    let y = (rng.random::<f64>() * 2.0 - 1.0) * half_height;
                    Vec3::new(radius * Float::cos(theta), y, radius * Float::sin(theta))
                } else {
                    let r = radius * Float::sqrt(rng.random::<f64>());
                    let y = if rng.random::<bool>() { half_height } else { -half_height };
                    Vec3::new(r * Float::cos(theta), y, r * Float::sin(theta))
                }
            }
        };
        local + self.center
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if let Some(u) = v.try_normalize() {
            return u;
        }
    }
}

/// A procedural object: 1 to 6 primitives inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralScene {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

pub const MAX_PRIMITIVES: usize = 6;

// Independent streams for the different consumers of one seed.
const SCENE_STREAM: u64 = 0x5343_454e_4500_0001;
const CAMERA_STREAM: u64 = 0x4341_4d45_5241_0002;
const BATCH_STREAM: u64 = 0x4241_5443_4800_0003;
const SURFACE_STREAM: u64 = 0x5355_5246_0000_0004;

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

pub fn make_scene(seed: u64) -> ProceduralScene {
    let mut rng = stream(seed, SCENE_STREAM);
    let count = rng.random_range(1..=MAX_PRIMITIVES);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Sphere { radius: rng.random_range(0.15..0.45) },
            1 => Shape::Box {
                half: Vec3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)),
            },
            _ => Shape::Cylinder { radius: rng.random_range(0.1..0.35), half_height: rng.random_range(0.1..0.4) },
        };
        let mut prim = Primitive { shape, center: Vec3::ZERO, albedo: [0.0; 3] };
        let room = 1.0 - prim.bounding_radius();
        let r = room * Float::cbrt(rng.random::<f64>());
        prim.center = unit_vector(&mut rng) * r;
        prim.albedo = core::array::from_fn(|_| rng.random_range(0.15f32..0.95));
        primitives.push(prim);
    }
    ProceduralScene { primitives, seed }
}

impl ProceduralScene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.primitives.len() > MAX_PRIMITIVES {
            return Err(Error::invalid(format!("scene has {} primitives", self.primitives.len())));
        }
        for p in &self.primitives {
            if !p.is_valid() {
                return Err(Error::invalid("degenerate primitive"));
            }
            if p.center.norm() + p.bounding_radius() > 1.0 + 1e-12 {
                return Err(Error::invalid("primitive leaves the unit ball"));
            }
        }
        Ok(())
    }

    /// Closest hit over all primitives, with the index of the primitive hit.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(Hit, usize)> {
        let mut best: Option<(Hit, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.intersect(origin, dir) {
                if best.is_none_or(|(b, _)| h.t < b.t) {
                    best = Some((h, i));
                }
            }
        }
        best
    }

    /// Unsigned distance from `p` to the closest primitive surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|prim| prim.surface_distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Area-weighted uniform samples of the exterior surface (samples that
    /// fall inside another primitive are rejected).
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<[f32; 3]> {
        let mut rng = stream(seed ^ self.seed, SURFACE_STREAM);
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::surface_area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < n * 50 {
            attempts += 1;
            let mut pick = rng.random::<f64>() * total;
            let mut idx = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let p = self.primitives[idx].sample_surface(&mut rng);
            let hidden = self.primitives.iter().enumerate().any(|(j, q)| j != idx && q.contains(p, 1e-9));
            if !hidden {
                out.push(p.to_f32());
            }
        }
        out
    }
}

/// Camera rig protocol for one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RigConfig {
    pub resolution: usize,
    pub fov_deg: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub views_per_scene: usize,
    /// 1 (exact, pixel-center rays) or 4 (rotated-grid supersampling of RGB).
    pub samples_per_pixel: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            resolution: 64,
            fov_deg: 60.0,
            radius_min: 1.8,
            radius_max: 3.2,
            views_per_scene: 25,
            samples_per_pixel: 1,
        }
    }
}

impl RigConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.resolution, self.resolution, self.fov_deg)
    }
}

/// `n` cameras around the origin, all looking at it, with uniformly
/// distributed directions and radii uniform in `[r_min, r_max]`. Cameras are
/// roll-free with respect to world up `+y` (fallback up `+x` at the poles).
pub fn sample_cameras(seed: u64, n: usize, radius: (f64, f64), intrinsics: Intrinsics) -> Result<Vec<CameraPose>> {
    let (r_min, r_max) = radius;
    if !(r_min > 1.0) {
        return Err(Error::invalid(format!("minimum camera radius {r_min} must exceed 1 (unit ball)")));
    }
    if !(r_max >= r_min) {
        return Err(Error::invalid("radius range is empty"));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one camera"));
    }
    intrinsics.validate()?;
    let mut rng = stream(seed, CAMERA_STREAM);
    (0..n)
        .map(|_| {
            let dir = unit_vector(&mut rng);
            let r = if r_max > r_min { rng.random_range(r_min..=r_max) } else { r_min };
            CameraPose::look_at(dir * r, Vec3::ZERO, Vec3::Y, Vec3::X, intrinsics)
        })
        .collect()
}

pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
const AMBIENT: f64 = 0.3;
const LIGHTS: [([f64; 3], f64); 2] = [([0.3, 0.9, -0.3], 0.65), ([-0.6, 0.2, 0.7], 0.35)];

fn shade(albedo: [f32; 3], normal: Vec3) -> [f32; 3] {
    let mut light = AMBIENT;
    for (dir, intensity) in LIGHTS {
        light += intensity * normal.dot(Vec3(dir).normalize()).max(0.0);
    }
    albedo.map(|a| (a as f64 * light).clamp(0.0, 1.0) as f32)
}

/// RGBD render of one view. Depth is camera `z` (0 for background); the point
/// map holds world coordinates (zero for background).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pose: CameraPose,
    /// `H x W x 3`, row-major, in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    /// `H x W x 3` world points.
    pub pointmap: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.pose.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.pose.intrinsics.height
    }

    /// Re-expresses the view in a new world frame. Depth scales with the
    /// similarity; colors and mask are unchanged.
    pub fn transformed(&self, sim: &Similarity) -> RenderedView {
        let mut pointmap = self.pointmap.clone();
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                let p = Vec3::new(pointmap[3 * i] as f64, pointmap[3 * i + 1] as f64, pointmap[3 * i + 2] as f64);
                pointmap[3 * i..3 * i + 3].copy_from_slice(&sim.apply_point(p).to_f32());
            }
        }
        RenderedView {
            pose: sim.apply_pose(&self.pose),
            rgb: self.rgb.clone(),
            depth: self.depth.iter().map(|d| (*d as f64 * sim.scale) as f32).collect(),
            pointmap,
            mask: self.mask.clone(),
        }
    }

    pub fn foreground_points(&self) -> Vec<[f32; 3]> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| [self.pointmap[3 * i], self.pointmap[3 * i + 1], self.pointmap[3 * i + 2]])
            .collect()
    }
}

const SUBPIXEL: [(f64, f64); 4] = [(0.375, 0.125), (0.875, 0.375), (0.625, 0.875), (0.125, 0.625)];

pub fn render_rgbd(scene: &ProceduralScene, pose: &CameraPose, samples_per_pixel: usize) -> Result<RenderedView> {
    pose.validate()?;
    let k = pose.intrinsics;
    let n = k.pixel_count();
    let mut rgb = vec![0.0f32; 3 * n];
    let mut depth = vec![0.0f32; n];
    let mut pointmap = vec![0.0f32; 3 * n];
    let mut mask = vec![false; n];
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            let ray = pose.pixel_ray(u, v);
            match scene.intersect(pose.center, ray) {
                Some((hit, idx)) => {
                    depth[i] = hit.t as f32;
                    pointmap[3 * i..3 * i + 3].copy_from_slice(&(pose.center + ray * hit.t).to_f32());
                    mask[i] = true;
                    if samples_per_pixel <= 1 {
                        rgb[3 * i..3 * i + 3].copy_from_slice(&shade(scene.primitives[idx].albedo, hit.normal));
                    }
                }
                None if samples_per_pixel <= 1 => rgb[3 * i..3 * i + 3].copy_from_slice(&BACKGROUND),
                None => {}
            }
            if samples_per_pixel > 1 {
                let mut acc = [0.0f64; 3];
                for (sx, sy) in SUBPIXEL {
                    let d = pose.rotation.mul_vec(k.unproject(u as f64 + sx, v as f64 + sy));
                    let c = match scene.intersect(pose.center, d) {
                        Some((hit, idx)) => shade(scene.primitives[idx].albedo, hit.normal),
                        None => BACKGROUND,
                    };
                    for ch in 0..3 {
                        acc[ch] += c[ch] as f64 * 0.25;
                    }
                }
                for ch in 0..3 {
                    rgb[3 * i + ch] = acc[ch].clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(RenderedView { pose: *pose, rgb, depth, pointmap, mask })
}

/// One supervised sample: four source views sharing a normalized frame (the
/// first is canonical) and one target view in the same frame.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub sources: Arc<[RenderedView]>,
    pub target: RenderedView,
    /// Maps the scene frame to the normalized frame.
    pub similarity: Similarity,
}

pub const SOURCES_PER_EXAMPLE: usize = 4;
pub const TARGETS_PER_DRAW: usize = 3;
pub const VIEWS_PER_DRAW: usize = SOURCES_PER_EXAMPLE + TARGETS_PER_DRAW;

/// Seven distinct view indices out of `n_views`: four sources, then three
/// targets.
pub fn sample_view_indices(n_views: usize, seed: u64) -> Result<[usize; VIEWS_PER_DRAW]> {
    if n_views < VIEWS_PER_DRAW {
        return Err(Error::invalid(format!("need at least {VIEWS_PER_DRAW} views, got {n_views}")));
    }
    let mut rng = stream(seed, BATCH_STREAM);
    let mut pool: Vec<usize> = (0..n_views).collect();
    for i in 0..VIEWS_PER_DRAW {
        let j = rng.random_range(i..n_views);
        pool.swap(i, j);
    }
    Ok(core::array::from_fn(|i| pool[i]))
}

/// Builds the three examples of one draw from seven already-selected views.
pub fn examples_from_views(selected: &[RenderedView]) -> Result<Vec<TrainingExample>> {
    if selected.len() < SOURCES_PER_EXAMPLE + 1 {
        return Err(Error::invalid("need four sources and at least one target"));
    }
    let poses: Vec<CameraPose> = selected.iter().map(|v| v.pose).collect();
    let (normalized, similarity) = normalize_cameras(&poses)?;
    let mut views: Vec<RenderedView> = selected.iter().map(|v| v.transformed(&similarity)).collect();
    for (v, p) in views.iter_mut().zip(&normalized) {
        v.pose = *p;
    }
    let targets = views.split_off(SOURCES_PER_EXAMPLE);
    let sources: Arc<[RenderedView]> = views.into();
    Ok(targets
        .into_iter()
        .map(|target| TrainingExample { sources: sources.clone(), target, similarity })
        .collect())
}

/// Draws seven distinct views; the first four are shared sources and each of
/// the remaining three is the target of one example.
pub fn sample_batch(scene_views: &[RenderedView], seed: u64) -> Result<Vec<TrainingExample>> {
    let idx = sample_view_indices(scene_views.len(), seed)?;
    let selected: Vec<RenderedView> = idx.iter().map(|&i| scene_views[i].clone()).collect();
    examples_from_views(&selected)
}

/// Renders every camera of a scene rig.
pub fn render_rig(scene: &ProceduralScene, rig: &RigConfig) -> Result<Vec<RenderedView>> {
    scene_cameras(scene.seed, rig)?
        .iter()
        .map(|p| render_rgbd(scene, p, rig.samples_per_pixel))
        .collect()
}

pub fn scene_cameras(seed: u64, rig: &RigConfig) -> Result<Vec<CameraPose>> {
    sample_cameras(seed, rig.views_per_scene, (rig.radius_min, rig.radius_max), rig.intrinsics())
}

/// Same result as `sample_batch(&render_rig(..), seed)` but only renders the
/// seven selected views.
pub fn draw_examples(scene: &ProceduralScene, rig: &RigConfig, seed: u64) -> Result<Vec<TrainingExample>> {
    let cams = scene_cameras(scene.seed, rig)?;
    let idx = sample_view_indices(cams.len(), seed)?;
    let selected = idx
        .iter()
        .map(|&i| render_rgbd(scene, &cams[i], rig.samples_per_pixel))
        .collect::<Result<Vec<_>>>()?;
    examples_from_views(&selected)
}
