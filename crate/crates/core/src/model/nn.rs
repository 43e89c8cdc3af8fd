//! Dense layers with hand-written backward passes. All buffers are row-major;
//! backward functions accumulate into their gradient outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{mm_nn, mm_nt, mm_tn, Real};

/// `y = x W + b`, `x: n x din`, `W: din x dout`.
pub fn linear<T: Real>(x: &[T], n: usize, din: usize, dout: usize, wb: &[T], y: &mut [T]) -> u64 {
    let (w, b) = wb.split_at(din * dout);
    mm_nn(n, din, dout, x, w, T::zero(), y);
    for row in y.chunks_mut(dout) {
        for (a, bb) in row.iter_mut().zip(b) {
            *a += *bb;
        }
    }
    2 * (n * din * dout) as u64
}

/// Gradients of [`linear`]. `dwb` holds `dW` followed by `db`.
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    din: usize,
    dout: usize,
    wb: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dwb: &mut [T],
) {
    let (dw, db) = dwb.split_at_mut(din * dout);
    mm_tn(din, n, dout, x, dy, T::one(), dw);
    for row in dy.chunks(dout) {
        for (a, g) in db.iter_mut().zip(row) {
            *a += *g;
        }
    }
    if let Some(dx) = dx {
        mm_nt(n, dout, din, dy, &wb[..din * dout], T::one(), dx);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm with affine parameters `gb = [gamma; beta]`.
pub fn layer_norm<T: Real>(x: &[T], n: usize, d: usize, gb: &[T], y: &mut [T], cache: Option<&mut LnCache<T>>) {
    let (g, b) = gb.split_at(d);
    let inv_d = T::c(1.0 / d as f64);
    let eps = T::c(LN_EPS);
    let mut xhat_all = Vec::new();
    let mut rstd_all = Vec::new();
    let keep = cache.is_some();
    if keep {
        xhat_all.reserve(n * d);
        rstd_all.reserve(n);
    }
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)).take(n) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            let xh = (xr[j] - mean) * rstd;
            yr[j] = xh * g[j] + b[j];
            if keep {
                xhat_all.push(xh);
            }
        }
        if keep {
            rstd_all.push(rstd);
        }
    }
    if let Some(c) = cache {
        c.xhat = xhat_all;
        c.rstd = rstd_all;
    }
}

pub fn layer_norm_backward<T: Real>(cache: &LnCache<T>, n: usize, d: usize, gb: &[T], dy: &[T], dx: &mut [T], dgb: &mut [T]) {
    let g = &gb[..d];
    let (dg, db) = dgb.split_at_mut(d);
    let inv_d = T::c(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)` which equals
/// `0.5 x (1 + tanh(u))` but only needs one `exp`.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    x / (T::one() + (-(u + u)).fast_exp())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).fast_exp());
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

/// One decoder stage: nearest 2x upsample of an `h x w x cin` map
/// followed by a zero-padded 3x3 convolution to `2h x 2w x cout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConv {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl UpConv {
    pub fn out_pixels(&self) -> usize {
        4 * self.h * self.w
    }

    pub fn col_width(&self) -> usize {
        9 * self.cin
    }

    /// Low-resolution source pixel feeding tap `(ky, kx)` of output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let (yy, xx) = ((oy + ky) as isize - 1, (ox + kx) as isize - 1);
        if yy < 0 || xx < 0 || yy >= 2 * self.h as isize || xx >= 2 * self.w as isize {
            return None;
        }
        Some((yy as usize / 2) * self.w + xx as usize / 2)
    }

    pub fn im2col<T: Real>(&self, input: &[T], cols: &mut Vec<T>) {
        let (ow, cw, cin) = (2 * self.w, self.col_width(), self.cin);
        cols.clear();
        cols.resize(self.out_pixels() * cw, T::zero());
        for oy in 0..2 * self.h {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * cw..(oy * ow + ox + 1) * cw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(s) = self.source(oy, ox, ky, kx) {
                            let tap = ky * 3 + kx;
                            row[tap * cin..(tap + 1) * cin].copy_from_slice(&input[s * cin..(s + 1) * cin]);
                        }
                    }
                }
            }
        }
    }

    pub fn col2im_add<T: Real>(&self, dcols: &[T], dinput: &mut [T]) {
        let (ow, cw, cin) = (2 * self.w, self.col_width(), self.cin);
        for oy in 0..2 * self.h {
            for ox in 0..ow {
                let row = &dcols[(oy * ow + ox) * cw..(oy * ow + ox + 1) * cw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(s) = self.source(oy, ox, ky, kx) {
                            let tap = ky * 3 + kx;
                            for (d, g) in dinput[s * cin..(s + 1) * cin].iter_mut().zip(&row[tap * cin..(tap + 1) * cin]) {
                                *d += *g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward with ReLU. Keeps the column buffer for the backward pass.
    pub fn forward<T: Real>(&self, input: &[T], wb: &[T], cols: &mut Vec<T>, out: &mut Vec<T>) -> u64 {
        self.im2col(input, cols);
        out.clear();
        out.resize(self.out_pixels() * self.cout, T::zero());
        let flops = linear(cols, self.out_pixels(), self.col_width(), self.cout, wb, out);
        for v in out.iter_mut() {
            *v = v.max(T::zero());
        }
        flops
    }

    /// Backward through ReLU and the conv given the post-ReLU output.
    pub fn backward<T: Real>(&self, cols: &[T], out: &[T], wb: &[T], dout: &mut [T], dinput: Option<&mut [T]>, dwb: &mut [T]) {
        for (g, o) in dout.iter_mut().zip(out) {
            if *o <= T::zero() {
                *g = T::zero();
            }
        }
        let np = self.out_pixels();
        match dinput {
            Some(din) => {
                let mut dcols = vec![T::zero(); np * self.col_width()];
                linear_backward(cols, np, self.col_width(), self.cout, wb, dout, Some(&mut dcols), dwb);
                self.col2im_add(&dcols, din);
            }
            None => linear_backward(cols, np, self.col_width(), self.cout, wb, dout, None, dwb),
        }
    }
}

/// 2D sinusoidal positional encoding for a `gh x gw` grid: the first half of
/// the channels encode the row, the second half the column.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut pe = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut pe[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for i in 0..quarter {
                let freq = num_traits::Float::powf(10_000.0f64, -(i as f64) / quarter as f64);
                let (sy, cy) = num_traits::Float::sin_cos(y as f64 * freq);
                let (sx, cx) = num_traits::Float::sin_cos(x as f64 * freq);
                row[i] = sy;
                row[quarter + i] = cy;
                row[half + i] = sx;
                row[half + quarter + i] = cx;
            }
        }
    }
    pe
}
