//! Camera models, Plücker ray maps, world-frame normalization, up-direction
//! recovery and point-cloud utilities.
//!
//! Extrinsics are camera-to-world: a camera at `center` with rotation `R`
//! maps a camera-frame direction `d_c` to the world direction `R * d_c`. The
//! camera looks along its local `+z`, image `x` grows right and image `y`
//! grows down. Pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{rad, Mat3, Vec3};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center, given horizontal
    /// field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let f = (width as f64 * 0.5) / Float::tan(rad(fov_deg) * 0.5);
        Intrinsics { fx: f, fy: f, cx: width as f64 * 0.5, cy: height as f64 * 0.5, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!("principal point ({}, {}) outside image", self.cx, self.cy)));
        }
        Ok(())
    }

    /// Camera-frame ray through continuous pixel coordinates, scaled to `z = 1`.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Ray through the center of pixel `(u, v)`, scaled to `z = 1`.
    #[inline]
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        self.unproject(u as f64 + 0.5, v as f64 + 0.5)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Camera-to-world rigid pose plus intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
    pub intrinsics: Intrinsics,
}

/// Center of the canonical first camera.
pub const CANONICAL_CENTER: Vec3 = Vec3::new(0.0, 0.0, -1.0);

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3, intrinsics: Intrinsics) -> Self {
        CameraPose { rotation, center, intrinsics }
    }

    /// `[I | (0, 0, -1)]`: the pose every first source view is mapped to.
    pub fn canonical(intrinsics: Intrinsics) -> Self {
        CameraPose { rotation: Mat3::IDENTITY, center: CANONICAL_CENTER, intrinsics }
    }

    pub fn is_canonical(&self) -> bool {
        self.rotation == Mat3::IDENTITY && self.center == CANONICAL_CENTER
    }

    /// Camera at `center` looking at `target`, rolled so that its image-up
    /// direction lies in the plane of `up` and the optical axis. Falls back to
    /// `fallback_up` when the optical axis is parallel to `up`.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3, fallback_up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = (target - center)
            .try_normalize()
            .ok_or_else(|| Error::InvalidCamera("camera center coincides with look-at target".into()))?;
        let mut right = (-up).cross(forward);
        if right.norm() < 1e-9 {
            right = (-fallback_up).cross(forward);
        }
        let right = right
            .try_normalize()
            .ok_or_else(|| Error::InvalidCamera("up vectors parallel to optical axis".into()))?;
        let down = forward.cross(right);
        Ok(CameraPose { rotation: Mat3::from_cols(right, down, forward), center, intrinsics })
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !self.rotation.is_finite() || !self.center.is_finite() {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let ortho = self.rotation.orthonormality_error();
        if ortho > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (error {ortho:.3e})")));
        }
        let det = self.rotation.det();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.col(2)
    }

    /// Image-up direction in world coordinates, `-R * (0, 1, 0)`.
    pub fn up(&self) -> Vec3 {
        -self.rotation.col(1)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(p - self.center)
    }

    /// Continuous pixel coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let q = self.world_to_camera(p);
        if q.z() <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy))
    }

    /// World-frame ray direction through pixel `(u, v)`, scaled so that its
    /// camera-frame depth component is 1. `center + z * ray` is the point at
    /// depth `z`.
    #[inline]
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        self.rotation.mul_vec(self.intrinsics.pixel_ray(u, v))
    }

    /// Camera depth (`z` in the camera frame) of a world point.
    pub fn depth_of(&self, p: Vec3) -> f64 {
        self.world_to_camera(p).z()
    }

    /// Distance from the world origin to the optical-axis line, and whether
    /// the origin lies in front of the camera.
    pub fn origin_offset(&self) -> (f64, bool) {
        let a = self.optical_axis();
        (self.center.cross(a).norm(), (-self.center).dot(a) > 0.0)
    }
}

/// Per-pixel Plücker coordinates `(d, m = c x d)` of a camera's rays.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerMap {
    pub width: usize,
    pub height: usize,
    pub directions: Vec<Vec3>,
    pub moments: Vec<Vec3>,
}

impl PluckerMap {
    /// Interleaved `[d, m]` six-channel map, row-major.
    pub fn to_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.directions.len() * 6);
        for (d, m) in self.directions.iter().zip(&self.moments) {
            out.extend_from_slice(&d.to_f32());
            out.extend_from_slice(&m.to_f32());
        }
        out
    }
}

pub fn plucker_map(pose: &CameraPose) -> Result<PluckerMap> {
    pose.validate()?;
    let k = pose.intrinsics;
    let mut directions = Vec::with_capacity(k.pixel_count());
    let mut moments = Vec::with_capacity(k.pixel_count());
    for v in 0..k.height {
        for u in 0..k.width {
            let d = pose.pixel_ray(u, v).normalize();
            directions.push(d);
            moments.push(pose.center.cross(d));
        }
    }
    Ok(PluckerMap { width: k.width, height: k.height, directions, moments })
}

/// World-frame similarity `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::IDENTITY
    }
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { scale: 1.0, rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) * self.scale + self.translation
    }

    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation.mul_mat(pose.rotation),
            center: self.apply_point(pose.center),
            intrinsics: pose.intrinsics,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Similarity { scale: inv_scale, rotation: rt, translation: -(rt.mul_vec(self.translation) * inv_scale) }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * first.scale,
            rotation: self.rotation.mul_mat(first.rotation),
            translation: self.apply_point(first.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Similarity::IDENTITY
    }
}

/// Maps the first camera to `[I | (0, 0, -1)]` and every other camera by the
/// same similarity. The scale puts the first camera center at unit distance
/// from the origin.
pub fn normalize_cameras(poses: &[CameraPose]) -> Result<(Vec<CameraPose>, Similarity)> {
    let first = poses.first().ok_or_else(|| Error::invalid("normalize_cameras needs at least one pose"))?;
    let dist = first.center.norm();
    if !(dist > 1e-12) || !dist.is_finite() {
        return Err(Error::DegenerateScale);
    }
    let sim = if first.is_canonical() {
        Similarity::IDENTITY
    } else {
        let rotation = first.rotation.transpose();
        let scale = 1.0 / dist;
        let translation = CANONICAL_CENTER - rotation.mul_vec(first.center) * scale;
        Similarity { scale, rotation, translation }
    };
    let mut out: Vec<CameraPose> = poses.iter().map(|p| sim.apply_pose(p)).collect();
    out[0] = CameraPose::canonical(first.intrinsics);
    Ok((out, sim))
}

/// Back-projects a depth map into world points. Zero depth is background and
/// maps to the zero vector with a `false` mask entry.
pub fn depth_to_pointmap(depth: &[f32], pose: &CameraPose) -> Result<(Vec<[f32; 3]>, Vec<bool>)> {
    pose.validate()?;
    let k = pose.intrinsics;
    if depth.len() != k.pixel_count() {
        return Err(Error::shape(format!("depth has {} entries for a {}x{} camera", depth.len(), k.width, k.height)));
    }
    let mut points = vec![[0.0f32; 3]; depth.len()];
    let mut mask = vec![false; depth.len()];
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            let z = depth[i];
            if z > 0.0 {
                let p = pose.center + pose.pixel_ray(u, v) * z as f64;
                points[i] = p.to_f32();
                mask[i] = true;
            }
        }
    }
    Ok((points, mask))
}

/// Point set with optional per-point color and confidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub confidences: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<[f32; 3]>) -> Self {
        PointCloud { points, colors: None, confidences: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::shape("color count differs from point count"));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("colors outside [0, 1]"));
            }
        }
        if let Some(c) = &self.confidences {
            if c.len() != self.points.len() {
                return Err(Error::shape("confidence count differs from point count"));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite confidence"));
            }
        }
        Ok(())
    }

    /// Appends `other`. Attribute channels missing on one side are filled
    /// with white / unit confidence.
    pub fn extend(&mut self, other: &PointCloud) {
        let n_self = self.points.len();
        if self.colors.is_some() || other.colors.is_some() {
            let mine = self.colors.get_or_insert_with(|| vec![[1.0; 3]; n_self]);
            match &other.colors {
                Some(c) => mine.extend_from_slice(c),
                None => mine.extend(core::iter::repeat_n([1.0; 3], other.len())),
            }
        }
        if self.confidences.is_some() || other.confidences.is_some() {
            let mine = self.confidences.get_or_insert_with(|| vec![1.0; n_self]);
            match &other.confidences {
                Some(c) => mine.extend_from_slice(c),
                None => mine.extend(core::iter::repeat_n(1.0, other.len())),
            }
        }
        self.points.extend_from_slice(&other.points);
    }

    pub fn transformed(&self, sim: &Similarity) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| sim.apply_point(Vec3::from_f32(*p)).to_f32()).collect(),
            colors: self.colors.clone(),
            confidences: self.confidences.clone(),
        }
    }
}

#[inline]
fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Point counts above which nearest-neighbour queries use the uniform grid.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

/// Distance from every query to its nearest reference point.
pub fn nearest_distances(queries: &[[f32; 3]], reference: &[[f32; 3]]) -> Vec<f64> {
    if queries.len().max(reference.len()) <= BRUTE_FORCE_LIMIT {
        nearest_distances_brute(queries, reference)
    } else {
        NeighborGrid::new(reference).nearest_distances(queries)
    }
}

fn nearest_distances_brute(queries: &[[f32; 3]], reference: &[[f32; 3]]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| {
            let best = reference.iter().fold(f64::INFINITY, |m, r| m.min(dist2(*q, *r)));
            Float::sqrt(best)
        })
        .collect()
}

/// Uniform hash grid for exact nearest-neighbour search.
pub struct NeighborGrid<'a> {
    points: &'a [[f32; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NeighborGrid<'a> {
    pub fn new(points: &'a [[f32; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let ext: [f64; 3] = core::array::from_fn(|a| (hi[a] - lo[a]).max(1e-9));
        let volume = ext[0] * ext[1] * ext[2];
        // ~2 points per cell
        let cell = Float::cbrt(volume * 2.0 / points.len().max(1) as f64).max(ext[0].max(ext[1]).max(ext[2]) / 256.0);
        let dims: [usize; 3] = core::array::from_fn(|a| ((ext[a] / cell) as usize + 1).min(1024));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cell_of = |p: &[f32; 3]| -> usize {
            let c: [usize; 3] =
                core::array::from_fn(|a| (((p[a] as f64 - lo[a]) / cell) as usize).min(dims[a] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        NeighborGrid { points, origin: lo, cell, dims, starts, order }
    }

    pub fn nearest(&self, q: [f32; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let dims: [i64; 3] = core::array::from_fn(|a| self.dims[a] as i64);
        let coord: [i64; 3] = core::array::from_fn(|a| Float::floor((q[a] as f64 - self.origin[a]) / self.cell) as i64);
        // Chebyshev ring distance from the query cell to the grid box.
        let first_ring = (0..3)
            .map(|a| if coord[a] < 0 { -coord[a] } else if coord[a] >= dims[a] { coord[a] - dims[a] + 1 } else { 0 })
            .max()
            .unwrap_or(0);
        let last_ring = (0..3).map(|a| coord[a].abs().max((coord[a] - dims[a] + 1).abs())).max().unwrap_or(0);
        for ring in first_ring..=last_ring {
            // Points in ring r are at least (r - 1) cells away.
            let reach = (ring - 1).max(0) as f64 * self.cell;
            if reach * reach > best {
                break;
            }
            let span = |a: usize| ((coord[a] - ring).max(0), (coord[a] + ring).min(dims[a] - 1));
            let (z0, z1) = span(2);
            let (y0, y1) = span(1);
            let (x0, x1) = span(0);
            for z in z0..=z1 {
                let z_on = (z - coord[2]).abs() == ring;
                for y in y0..=y1 {
                    let on = z_on || (y - coord[1]).abs() == ring;
                    let mut visit = |x: i64| {
                        let id = ((z * dims[1] + y) * dims[0] + x) as usize;
                        for &pi in &self.order[self.starts[id]..self.starts[id + 1]] {
                            best = best.min(dist2(q, self.points[pi]));
                        }
                    };
                    if on {
                        for x in x0..=x1 {
                            visit(x);
                        }
                    } else {
                        for x in [coord[0] - ring, coord[0] + ring] {
                            if x >= x0 && x <= x1 && (ring > 0 || x == coord[0]) {
                                visit(x);
                            }
                        }
                        if ring == 0 {
                            break;
                        }
                    }
                }
            }
        }
        Float::sqrt(best)
    }

    pub fn nearest_distances(&self, queries: &[[f32; 3]]) -> Vec<f64> {
        queries.iter().map(|q| self.nearest(*q)).collect()
    }
}

/// Symmetric mean nearest-neighbour distance (mean of L2, not squared).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

pub fn chamfer_points(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sa: f64 = nearest_distances(a, b).iter().sum();
    let sb: f64 = nearest_distances(b, a).iter().sum();
    Ok(0.5 * (sa / a.len() as f64) + 0.5 * (sb / b.len() as f64))
}

/// Rotation about the world x axis that removes camera roll.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpCorrection {
    /// Radians.
    pub angle: f64,
    pub rotation: Mat3,
    /// Sum of squared roll angles (rad^2) after correction.
    pub residual: f64,
}

impl UpCorrection {
    pub fn similarity(&self) -> Similarity {
        Similarity { scale: 1.0, rotation: self.rotation, translation: Vec3::ZERO }
    }
}

/// Max distance (relative to camera distance) between the optical axis and
/// the world origin for a camera to count as looking at the origin.
pub const LOOK_AT_TOLERANCE: f64 = 1e-3;

/// Signed roll of a camera: angle between its image-up vector and the plane
/// spanned by the world up axis (`y`) and its optical axis. `None` when the
/// optical axis is parallel to the up axis.
pub fn roll_angle(rotation: Mat3) -> Option<f64> {
    let axis = rotation.col(2);
    let up = -rotation.col(1);
    let normal = Vec3::Y.cross(axis).try_normalize()?;
    if Vec3::Y.cross(axis).norm() < 1e-6 {
        return None;
    }
    Some(Float::asin(up.dot(normal).clamp(-1.0, 1.0)))
}

fn roll_objective(rotations: &[Mat3], angle: f64) -> f64 {
    let rx = Mat3::rot_x(angle);
    rotations.iter().filter_map(|r| roll_angle(rx.mul_mat(*r))).map(|r| r * r).sum()
}

/// Finds the rotation about the world x axis that minimises the summed
/// squared roll of all cameras: grid search over [-90°, 90°] in 0.5° steps,
/// then golden-section refinement to 0.05°.
///
/// Assumes every input image is upright with respect to the object; cameras
/// must look at the world origin.
pub fn recover_up_direction(poses: &[CameraPose]) -> Result<UpCorrection> {
    if poses.len() < 2 {
        return Err(Error::NotApplicable("up-direction recovery needs at least two cameras".into()));
    }
    for (i, p) in poses.iter().enumerate() {
        let (offset, in_front) = p.origin_offset();
        if !in_front || offset > LOOK_AT_TOLERANCE * p.center.norm().max(1.0) {
            return Err(Error::NotApplicable(format!("camera {i} does not look at the world origin")));
        }
    }
    // Cameras whose optical axis lies in the y-z plane keep a constant roll
    // under x rotations and carry no information.
    if poses.iter().all(|p| p.optical_axis().x().abs() < 1e-6) {
        return Err(Error::NotApplicable("every optical axis lies in the y-z plane; roll is undefined".into()));
    }
    let rotations: Vec<Mat3> = poses.iter().map(|p| p.rotation).collect();
    let step = rad(0.5);
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=360 {
        let a = rad(-90.0) + step * i as f64;
        let f = roll_objective(&rotations, a);
        if f < best.0 {
            best = (f, a);
        }
    }
    let (mut lo, mut hi) = ((best.1 - step).max(rad(-90.0)), (best.1 + step).min(rad(90.0)));
    let ratio = (Float::sqrt(5.0) - 1.0) * 0.5;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = roll_objective(&rotations, x1);
    let mut f2 = roll_objective(&rotations, x2);
    while hi - lo > rad(0.05) {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = roll_objective(&rotations, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = roll_objective(&rotations, x2);
        }
    }
    let mut angle = 0.5 * (lo + hi);
    let mut residual = roll_objective(&rotations, angle);
    if best.0 < residual {
        angle = best.1;
        residual = best.0;
    }
    Ok(UpCorrection { angle, rotation: Mat3::rot_x(angle), residual })
}
