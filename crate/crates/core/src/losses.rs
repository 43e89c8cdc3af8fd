//! Training objective: RGB, confidence-weighted point-map and camera terms.
//!
//! Every loss has a matching gradient routine that accumulates into caller
//! buffers, scaled by a caller weight, so the trainer can sum terms directly
//! into [`OutputGrads`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::model::{pose_to_raw, ModelOutputs, MultiOutputs, OutputGrads, TargetGrads, TargetMaps};
use crate::real::Real;
use crate::scene::{RenderedView, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub pmap: f64,
    pub cam: f64,
    pub perceptual: f64,
    /// Weight of the `-log(confidence)` regulariser.
    pub alpha: f64,
    pub huber_eps: f64,
    /// Seeds the frozen perceptual filter bank.
    pub perceptual_seed: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pmap: 0.2, cam: 1.0, perceptual: 0.5, alpha: 0.2, huber_eps: 0.1, perceptual_seed: 0x7065_7263 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pmap, self.cam, self.perceptual, self.alpha];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.huber_eps.is_finite() && self.huber_eps > 0.0) {
            return Err(Error::invalid("huber epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub total: f64,
    pub rgb_mse: f64,
    pub rgb_perceptual: f64,
    pub pmap: f64,
    pub cam: f64,
}

impl LossReport {
    pub fn compose(rgb_mse: f64, rgb_perceptual: f64, pmap: f64, cam: f64, w: &LossWeights) -> Self {
        let total = rgb_mse + w.perceptual * rgb_perceptual + w.pmap * pmap + w.cam * cam;
        LossReport { total, rgb_mse, rgb_perceptual, pmap, cam }
    }

    pub fn add(&mut self, o: &LossReport) {
        self.total += o.total;
        self.rgb_mse += o.rgb_mse;
        self.rgb_perceptual += o.rgb_perceptual;
        self.pmap += o.pmap;
        self.cam += o.cam;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            total: self.total * s,
            rgb_mse: self.rgb_mse * s,
            rgb_perceptual: self.rgb_perceptual * s,
            pmap: self.pmap * s,
            cam: self.cam * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.rgb_mse, self.rgb_perceptual, self.pmap, self.cam].iter().all(|v| v.is_finite())
    }
}

pub const PERCEPTUAL_SCALES: usize = 3;
pub const PERCEPTUAL_FILTERS: usize = 8;
const TAPS: usize = 27;

/// Frozen random 3x3 filters (3 -> 8 channels, zero padding), one bank per
/// pyramid level. Both the pyramid and the filters are linear, so the feature
/// distance is computed on the difference image.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualBank {
    /// `[scale][filter][ky][kx][channel]`.
    filters: Vec<f64>,
}

impl PerceptualBank {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = num_traits::Float::sqrt(1.0 / TAPS as f64);
        let filters = (0..PERCEPTUAL_SCALES * PERCEPTUAL_FILTERS * TAPS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        PerceptualBank { filters }
    }

    fn filter(&self, scale: usize, f: usize) -> &[f64] {
        let o = (scale * PERCEPTUAL_FILTERS + f) * TAPS;
        &self.filters[o..o + TAPS]
    }
}

fn avg_pool<T: Real>(x: &[T], w: usize, h: usize) -> Vec<T> {
    let (w2, h2) = (w / 2, h / 2);
    let q = T::c(0.25);
    let mut out = vec![T::zero(); w2 * h2 * 3];
    for y in 0..h2 {
        for xx in 0..w2 {
            for c in 0..3 {
                let at = |dy: usize, dx: usize| x[((2 * y + dy) * w + 2 * xx + dx) * 3 + c];
                out[(y * w2 + xx) * 3 + c] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * q;
            }
        }
    }
    out
}

fn avg_pool_backward<T: Real>(dout: &[T], w: usize, h: usize) -> Vec<T> {
    let (w2, h2) = (w / 2, h / 2);
    let q = T::c(0.25);
    let mut dx = vec![T::zero(); w * h * 3];
    for y in 0..h2 {
        for xx in 0..w2 {
            for c in 0..3 {
                let g = dout[(y * w2 + xx) * 3 + c] * q;
                for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[((2 * y + dy) * w + 2 * xx + ddx) * 3 + c] += g;
                }
            }
        }
    }
    dx
}

/// Calls `visit(pixel, source_pixel, tap_offset)` for every in-bounds
/// tap of a zero-padded 3x3 convolution.
fn for_each_tap(w: usize, h: usize, mut visit: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    visit(y * w + x, sy as usize * w + sx as usize, (ky * 3 + kx) * 3);
                }
            }
        }
    }
}

fn conv<T: Real>(x: &[T], w: usize, h: usize, bank: &PerceptualBank, scale: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w * h * PERCEPTUAL_FILTERS];
    for f in 0..PERCEPTUAL_FILTERS {
        let k: Vec<T> = bank.filter(scale, f).iter().map(|&v| T::c(v)).collect();
        for_each_tap(w, h, |p, s, t| {
            let mut acc = T::zero();
            for c in 0..3 {
                acc += k[t + c] * x[s * 3 + c];
            }
            out[p * PERCEPTUAL_FILTERS + f] += acc;
        });
    }
    out
}

fn conv_backward<T: Real>(dout: &[T], w: usize, h: usize, bank: &PerceptualBank, scale: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); w * h * 3];
    for f in 0..PERCEPTUAL_FILTERS {
        let k: Vec<T> = bank.filter(scale, f).iter().map(|&v| T::c(v)).collect();
        for_each_tap(w, h, |p, s, t| {
            let g = dout[p * PERCEPTUAL_FILTERS + f];
            for c in 0..3 {
                dx[s * 3 + c] += k[t + c] * g;
            }
        });
    }
    dx
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_rgb(pred_len: usize, gt_len: usize, width: usize, height: usize) -> Result<()> {
    if pred_len != width * height * 3 || gt_len != pred_len {
        return Err(Error::shape(format!("rgb buffers {pred_len}/{gt_len} for {width}x{height}")));
    }
    Ok(())
}

/// Levels of the difference pyramid that are at least one pixel wide.
fn pyramid_levels(width: usize, height: usize) -> usize {
    (0..PERCEPTUAL_SCALES).take_while(|&s| (width >> s) > 0 && (height >> s) > 0).count()
}

/// `(mse, perceptual)` between two `H x W x 3` images.
pub fn rgb_loss<T: Real>(pred: &[T], gt: &[T], width: usize, height: usize, bank: &PerceptualBank) -> Result<(T, T)> {
    check_rgb(pred.len(), gt.len(), width, height)?;
    let diff: Vec<T> = pred.iter().zip(gt).map(|(&p, &g)| p - g).collect();
    let mse = diff.iter().fold(T::zero(), |a, &d| a + d * d) / T::c(diff.len() as f64);
    let levels = pyramid_levels(width, height);
    let (mut level, mut w, mut h) = (diff, width, height);
    let mut perceptual = T::zero();
    for s in 0..levels {
        if s > 0 {
            level = avg_pool(&level, w, h);
            w /= 2;
            h /= 2;
        }
        let feats = conv(&level, w, h, bank, s);
        perceptual += feats.iter().fold(T::zero(), |a, &f| a + f.abs()) / T::c(feats.len() as f64);
    }
    Ok((mse, perceptual / T::c(levels as f64)))
}

/// Accumulates `w_mse * d(mse)/d(pred) + w_perc * d(perceptual)/d(pred)`.
#[allow(clippy::too_many_arguments)]
pub fn rgb_loss_backward<T: Real>(
    pred: &[T],
    gt: &[T],
    width: usize,
    height: usize,
    bank: &PerceptualBank,
    w_mse: T,
    w_perc: T,
    dpred: &mut [T],
) -> Result<()> {
    check_rgb(pred.len(), gt.len(), width, height)?;
    if dpred.len() != pred.len() {
        return Err(Error::shape("rgb gradient buffer"));
    }
    let diff: Vec<T> = pred.iter().zip(gt).map(|(&p, &g)| p - g).collect();
    let k = w_mse * T::c(2.0 / diff.len() as f64);
    for (g, &d) in dpred.iter_mut().zip(&diff) {
        *g += k * d;
    }
    let levels = pyramid_levels(width, height);
    let mut dims = vec![(width, height)];
    let mut pyramid = vec![diff];
    for s in 1..levels {
        let (w, h) = dims[s - 1];
        pyramid.push(avg_pool(&pyramid[s - 1], w, h));
        dims.push((w / 2, h / 2));
    }
    // Walk from the coarsest level down, carrying the gradient of each level.
    let mut carry: Option<Vec<T>> = None;
    for s in (0..levels).rev() {
        let (w, h) = dims[s];
        let feats = conv(&pyramid[s], w, h, bank, s);
        let scale = w_perc / T::c((levels * feats.len()) as f64);
        let dfeat: Vec<T> = feats.iter().map(|&f| sign(f) * scale).collect();
        let mut dlevel = conv_backward(&dfeat, w, h, bank, s);
        if let Some(c) = carry.take() {
            for (a, b) in dlevel.iter_mut().zip(c) {
                *a += b;
            }
        }
        if s > 0 {
            let (pw, ph) = dims[s - 1];
            carry = Some(avg_pool_backward(&dlevel, pw, ph));
        } else {
            for (g, d) in dpred.iter_mut().zip(dlevel) {
                *g += d;
            }
        }
    }
    Ok(())
}

fn norm3<T: Real>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Point-map inputs for one view.
#[derive(Debug, Clone, Copy)]
pub struct PointmapInputs<'a, T> {
    pub width: usize,
    pub height: usize,
    pub pred: &'a [T],
    pub gt: &'a [T],
    pub confidence: &'a [T],
    pub mask: &'a [bool],
}

impl<T: Real> PointmapInputs<'_, T> {
    fn check(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.pred.len() != 3 * n || self.gt.len() != 3 * n || self.confidence.len() != n || self.mask.len() != n {
            return Err(Error::shape(format!("point-map buffers for {}x{}", self.width, self.height)));
        }
        if let Some(i) = self.confidence.iter().position(|&c| !(c > T::zero())) {
            return Err(Error::invalid(format!("confidence at pixel {i} is not positive")));
        }
        Ok(())
    }

    fn residual(&self, i: usize) -> [T; 3] {
        core::array::from_fn(|c| self.pred[3 * i + c] - self.gt[3 * i + c])
    }

    /// Forward-difference neighbours of pixel `i` that are foreground along
    /// with it.
    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = (i % self.width, i / self.width);
        let right = (x + 1 < self.width).then_some(i + 1);
        let down = (y + 1 < self.height).then_some(i + self.width);
        right.into_iter().chain(down).filter(move |&j| self.mask[i] && self.mask[j])
    }

    fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn diff3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Mean over foreground pixels of
/// `c * |r| + c * (|dx r| + |dy r|) - alpha * log c`, where `r` is the point
/// residual and `dx`, `dy` are forward differences. Zero without foreground.
pub fn pointmap_loss<T: Real>(p: &PointmapInputs<'_, T>, alpha: T) -> Result<T> {
    p.check()?;
    let m = p.count();
    if m == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for i in (0..p.mask.len()).filter(|&i| p.mask[i]) {
        let r = p.residual(i);
        let mut e = norm3(r);
        for j in p.neighbours(i) {
            e += norm3(diff3(p.residual(j), r));
        }
        let c = p.confidence[i];
        total += c * e - alpha * c.ln();
    }
    Ok(total / T::c(m as f64))
}

/// Accumulates `weight * gradient` of [`pointmap_loss`] into `dpred` and
/// `dconf`.
pub fn pointmap_loss_backward<T: Real>(
    p: &PointmapInputs<'_, T>,
    alpha: T,
    weight: T,
    dpred: &mut [T],
    dconf: &mut [T],
) -> Result<()> {
    p.check()?;
    if dpred.len() != p.pred.len() || dconf.len() != p.confidence.len() {
        return Err(Error::shape("point-map gradient buffers"));
    }
    let m = p.count();
    if m == 0 {
        return Ok(());
    }
    let k = weight / T::c(m as f64);
    let unit = |v: [T; 3]| -> [T; 3] {
        let n = norm3(v);
        if n > T::zero() {
            v.map(|x| x / n)
        } else {
            [T::zero(); 3]
        }
    };
    for i in (0..p.mask.len()).filter(|&i| p.mask[i]) {
        let r = p.residual(i);
        let c = p.confidence[i];
        let mut e = norm3(r);
        let u = unit(r);
        for a in 0..3 {
            dpred[3 * i + a] += k * c * u[a];
        }
        for j in p.neighbours(i) {
            let d = diff3(p.residual(j), r);
            e += norm3(d);
            let u = unit(d);
            for a in 0..3 {
                dpred[3 * j + a] += k * c * u[a];
                dpred[3 * i + a] -= k * c * u[a];
            }
        }
        dconf[i] += k * (e - alpha / c);
    }
    Ok(())
}

/// `r^2 / (2 eps)` inside `[-eps, eps]`, `|r| - eps / 2` outside.
pub fn huber<T: Real>(r: T, eps: T) -> T {
    if r.abs() <= eps {
        r * r / (eps + eps)
    } else {
        r.abs() - eps * T::c(0.5)
    }
}

pub fn huber_grad<T: Real>(r: T, eps: T) -> T {
    if r.abs() <= eps {
        r / eps
    } else {
        sign(r)
    }
}

fn camera_residuals<T: Real>(pred: &[[T; 9]], gt: &[CameraPose]) -> Result<Vec<[T; 9]>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted poses for {} ground-truth poses", pred.len(), gt.len())));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let g = pose_to_raw(g);
            core::array::from_fn(|e| T::c(g[e]) - p[e])
        })
        .collect())
}

/// Huber loss on the 6D-rotation-plus-center residual: mean over the nine
/// elements of a view, summed over views.
pub fn camera_loss<T: Real>(pred: &[[T; 9]], gt: &[CameraPose], eps: T) -> Result<T> {
    let res = camera_residuals(pred, gt)?;
    let nine = T::c(9.0);
    Ok(res.iter().fold(T::zero(), |a, r| a + r.iter().fold(T::zero(), |b, &e| b + huber(e, eps)) / nine))
}

pub fn camera_loss_backward<T: Real>(pred: &[[T; 9]], gt: &[CameraPose], eps: T, weight: T, dpred: &mut [[T; 9]]) -> Result<()> {
    let res = camera_residuals(pred, gt)?;
    if dpred.len() != pred.len() {
        return Err(Error::shape("camera gradient buffer"));
    }
    let k = weight / T::c(9.0);
    for (d, r) in dpred.iter_mut().zip(&res) {
        for e in 0..9 {
            d[e] -= k * huber_grad(r[e], eps);
        }
    }
    Ok(())
}

fn cast<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::c(x as f64)).collect()
}

fn target_terms<T: Real>(
    maps: &TargetMaps<T>,
    target: &RenderedView,
    w: &LossWeights,
    bank: &PerceptualBank,
    grads: Option<(&mut TargetGrads<T>, T)>,
) -> Result<(f64, f64, f64)> {
    let (width, height) = (target.width(), target.height());
    if maps.width != width || maps.height != height {
        return Err(Error::shape(format!("prediction {}x{} for target {width}x{height}", maps.width, maps.height)));
    }
    let gt_rgb = cast::<T>(&target.rgb);
    let gt_pts = cast::<T>(&target.pointmap);
    let (mse, perc) = rgb_loss(&maps.rgb, &gt_rgb, width, height, bank)?;
    let p = PointmapInputs {
        width,
        height,
        pred: &maps.pointmap,
        gt: &gt_pts,
        confidence: &maps.confidence,
        mask: &target.mask,
    };
    let alpha = T::c(w.alpha);
    let pmap = pointmap_loss(&p, alpha)?;
    if let Some((g, scale)) = grads {
        rgb_loss_backward(&maps.rgb, &gt_rgb, width, height, bank, scale, scale * T::c(w.perceptual), &mut g.rgb)?;
        pointmap_loss_backward(&p, alpha, scale * T::c(w.pmap), &mut g.pointmap, &mut g.confidence)?;
    }
    Ok((mse.f64(), perc.f64(), pmap.f64()))
}

/// Loss of a single-target joint forward against its training example.
/// Camera supervision covers the source views only.
pub fn total_loss<T: Real>(
    outputs: &ModelOutputs<T>,
    example: &TrainingExample,
    w: &LossWeights,
    bank: &PerceptualBank,
) -> Result<LossReport> {
    let (mse, perc, pmap) = target_terms(&outputs.target, &example.target, w, bank, None)?;
    let gt: Vec<CameraPose> = example.sources.iter().map(|v| v.pose).collect();
    let cam = camera_loss(&outputs.raw_poses, &gt, T::c(w.huber_eps))?;
    Ok(LossReport::compose(mse, perc, pmap, cam.f64(), w))
}

/// Summed loss of the examples answered by one multi-target forward. They
/// share sources, so the camera term counts once per example. When `grads`
/// is given, `scale` times the gradient of the summed total is accumulated.
pub fn group_loss<T: Real>(
    outputs: &MultiOutputs<T>,
    examples: &[&TrainingExample],
    w: &LossWeights,
    bank: &PerceptualBank,
    mut grads: Option<(&mut OutputGrads<T>, T)>,
) -> Result<LossReport> {
    let Some(first) = examples.first() else {
        return Ok(LossReport::default());
    };
    if outputs.targets.len() != examples.len() {
        return Err(Error::shape(format!("{} target outputs for {} examples", outputs.targets.len(), examples.len())));
    }
    let mut report = LossReport::default();
    for (t, (maps, ex)) in outputs.targets.iter().zip(examples).enumerate() {
        let tg = match grads.as_mut() {
            Some((g, s)) => {
                let tg = g.targets.get_mut(t).ok_or_else(|| Error::shape("missing target gradient buffer"))?;
                Some((tg, *s))
            }
            None => None,
        };
        let (mse, perc, pmap) = target_terms(maps, &ex.target, w, bank, tg)?;
        report.add(&LossReport::compose(mse, perc, pmap, 0.0, w));
    }
    let gt: Vec<CameraPose> = first.sources.iter().map(|v| v.pose).collect();
    let eps = T::c(w.huber_eps);
    let cam = camera_loss(&outputs.raw_poses, &gt, eps)?.f64();
    let k = examples.len() as f64;
    report.cam += k * cam;
    report.total += k * w.cam * cam;
    if let Some((g, s)) = grads {
        camera_loss_backward(&outputs.raw_poses, &gt, eps, s * T::c(k * w.cam), &mut g.raw_poses)?;
    }
    Ok(report)
}
