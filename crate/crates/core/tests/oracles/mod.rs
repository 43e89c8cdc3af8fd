//! Independent reference implementations used by the integration tests and
//! the acceptance suite. Nothing here calls into the code it checks.
#![allow(dead_code)]

use scanformer_core::attention::{TokenLayout, ViewRole, MaskMode};
use scanformer_core::geometry::CameraPose;
use scanformer_core::linalg::Vec3;
use scanformer_core::scene::{Primitive, ProceduralScene, Shape};

/// Dense `n x n` additive mask built from view roles: 0 where attention is
/// allowed, `-inf` elsewhere.
pub fn dense_global_mask(layout: &TokenLayout) -> Vec<Vec<f64>> {
    let n = layout.len();
    let mut owner = vec![(0usize, ViewRole::Source); n];
    for (vi, v) in layout.views().iter().enumerate() {
        for t in v.start..v.start + v.len {
            owner[t] = (vi, v.role);
        }
    }
    let mut m = vec![vec![f64::NEG_INFINITY; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (vi, ri) = owner[i];
            let (vj, rj) = owner[j];
            let ok = match (ri, rj) {
                (_, ViewRole::Source) => true,
                (ViewRole::Source, ViewRole::Target) => false,
                (ViewRole::Target, ViewRole::Target) => vi == vj || layout.mode() == MaskMode::SingleTarget,
            };
            if ok {
                m[i][j] = 0.0;
            }
        }
    }
    m
}

pub fn dense_frame_mask(layout: &TokenLayout) -> Vec<Vec<f64>> {
    let n = layout.len();
    let mut m = vec![vec![f64::NEG_INFINITY; n]; n];
    for v in layout.views() {
        for i in v.start..v.start + v.len {
            for j in v.start..v.start + v.len {
                m[i][j] = 0.0;
            }
        }
    }
    m
}

/// Textbook multi-head attention with an additive mask, in f64.
pub fn dense_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dim: usize, heads: usize, mask: &[Vec<f64>]) -> Vec<f64> {
    let dh = dim / heads;
    let mut out = vec![0.0; n * dim];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = (0..dh).map(|c| q[i * dim + h * dh + c] * k[j * dim + h * dh + c]).sum();
                    s / (dh as f64).sqrt() + mask[i][j]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                out[i * dim + h * dh + c] = (0..n).map(|j| w[j] / z * v[j * dim + h * dh + c]).sum();
            }
        }
    }
    out
}

/// SSIM with an explicit 2-D 11x11 Gaussian window (sigma 1.5) evaluated at
/// every valid position, averaged over the three channels.
pub fn direct_ssim(a: &[f32], b: &[f32], w: usize, h: usize) -> f64 {
    const N: usize = 11;
    let mut win = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, e) in row.iter_mut().enumerate() {
            let (dx, dy) = (x as f64 - 5.0, y as f64 - 5.0);
            *e = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *e;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    for ch in 0..3 {
        let px = |img: &[f32], x: usize, y: usize| img[(y * w + x) * 3 + ch] as f64;
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - N {
            for x0 in 0..=w - N {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, row) in win.iter().enumerate() {
                    for (dx, &g) in row.iter().enumerate() {
                        let g = g / total;
                        let (u, v) = (px(a, x0 + dx, y0 + dy), px(b, x0 + dx, y0 + dy));
                        ma += g * u;
                        mb += g * v;
                        saa += g * u * u;
                        sbb += g * v * v;
                        sab += g * u * v;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum += acc / count as f64;
    }
    sum / 3.0
}

/// Symmetric mean nearest-neighbour distance by exhaustive search.
pub fn brute_chamfer(a: &[[f32; 3]], b: &[[f32; 3]]) -> f64 {
    let d = |p: &[f32; 3], q: &[f32; 3]| {
        let s: f64 = (0..3).map(|i| (p[i] as f64 - q[i] as f64).powi(2)).sum();
        s.sqrt()
    };
    let one_way = |x: &[[f32; 3]], y: &[[f32; 3]]| {
        x.iter().map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    0.5 * one_way(a, b) + 0.5 * one_way(b, a)
}

/// Smallest positive ray parameter of one primitive, computed with a
/// normalised direction and per-face / per-surface tests.
pub fn primitive_hit(p: &Primitive, origin: Vec3, dir: Vec3) -> Option<f64> {
    let len = dir.norm();
    let d = dir * (1.0 / len);
    let o = origin - p.center;
    let ts: Vec<f64> = match p.shape {
        Shape::Sphere { radius } => {
            // Closest approach along the ray, then the chord half-length.
            let tc = -o.dot(d);
            let miss2 = o.dot(o) - tc * tc;
            if miss2 > radius * radius {
                vec![]
            } else {
                let half = (radius * radius - miss2).sqrt();
                vec![tc - half, tc + half]
            }
        }
        Shape::Box { half } => {
            let mut out = vec![];
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    if d[axis] == 0.0 {
                        continue;
                    }
                    let t = (sign * half[axis] - o[axis]) / d[axis];
                    let q = o + d * t;
                    let inside = (0..3).filter(|&a| a != axis).all(|a| q[a].abs() <= half[a] * (1.0 + 1e-12));
                    if inside {
                        out.push(t);
                    }
                }
            }
            out
        }
        Shape::Cylinder { radius, half_height } => {
            let mut out = vec![];
            let a = d[0] * d[0] + d[2] * d[2];
            if a > 0.0 {
                let b = 2.0 * (o[0] * d[0] + o[2] * d[2]);
                let c = o[0] * o[0] + o[2] * o[2] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    for t in [(-b - disc.sqrt()) / (2.0 * a), (-b + disc.sqrt()) / (2.0 * a)] {
                        if (o[1] + d[1] * t).abs() <= half_height {
                            out.push(t);
                        }
                    }
                }
            }
            if d[1] != 0.0 {
                for y in [-half_height, half_height] {
                    let t = (y - o[1]) / d[1];
                    let (x, z) = (o[0] + d[0] * t, o[2] + d[2] * t);
                    if x * x + z * z <= radius * radius {
                        out.push(t);
                    }
                }
            }
            out
        }
    };
    ts.into_iter().filter(|t| *t > 1e-9).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t)))).map(|t| t / len)
}

/// Per-pixel camera depth of the nearest primitive, 0 for background.
pub fn depth_oracle(scene: &ProceduralScene, pose: &CameraPose) -> Vec<f64> {
    let k = pose.intrinsics;
    let mut out = vec![0.0; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            // Camera-frame ray with unit depth component, rotated to world.
            let cam = Vec3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let dir = pose.rotation.mul_vec(cam);
            let t = scene.primitives.iter().filter_map(|p| primitive_hit(p, pose.center, dir)).fold(f64::INFINITY, f64::min);
            if t.is_finite() {
                out[v * k.width + u] = t;
            }
        }
    }
    out
}

/// Small deterministic generator for test inputs.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[-1, 1)`.
    pub fn sym(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    pub fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.sym() * scale).collect()
    }
}
