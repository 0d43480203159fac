//! Raw forward and backward kernels over row-major slices.
//!
//! Every loop runs in a fixed order so repeated calls are bitwise identical.

use super::scalar::{c, Scalar};

/// Geometry of a single-sample 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Input row touched by output row `o` and kernel row `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.c_out * ho * wo];
    for co in 0..g.c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..g.c_in {
            let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wgt = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..ho {
                        let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) {
                                *o = *o + wgt * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut gi = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for co in 0..g.c_out {
        let gplane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        gb[co] = gplane.iter().fold(T::zero(), |a, &b| a + b);
        for ci in 0..g.c_in {
            let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gsrc = &mut gi[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wgt = kernel[kidx];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        for ox in 0..wo {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) {
                                let go = gplane[oy * wo + ox];
                                acc = acc + go * src[iy * g.w + ix];
                                let s = &mut gsrc[iy * g.w + ix];
                                *s = *s + go * wgt;
                            }
                        }
                    }
                    gk[kidx] = acc;
                }
            }
        }
    }
    (gi, gk, gb)
}

/// `a[m,k] @ b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,k]ᵀ @ b[m,n]` → `[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,n] @ b[k,n]ᵀ` → `[m,k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for col in 0..cols {
            out[col * rows + r] = a[r * cols + col];
        }
    }
    out
}

/// Cached statistics of a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes every length-`d` row to zero mean and unit (population) variance.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
    d: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let dn: T = c(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / dn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            normalized[r * d + j] = xh;
            let gj = gamma.map_or(T::one(), |g| g[j]);
            let bj = beta.map_or(T::zero(), |b| b[j]);
            out[r * d + j] = gj * xh + bj;
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    grad_out: &[T],
    gamma: Option<&[T]>,
    cache: &LayerNormCache<T>,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = grad_out.len() / d;
    let dn: T = c(d as f64);
    let mut gx = vec![T::zero(); grad_out.len()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let mut dxh = vec![T::zero(); d];
    for r in 0..rows {
        let go = &grad_out[r * d..(r + 1) * d];
        let xh = &cache.normalized[r * d..(r + 1) * d];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            gg[j] = gg[j] + go[j] * xh[j];
            gb[j] = gb[j] + go[j];
            dxh[j] = go[j] * gamma.map_or(T::one(), |g| g[j]);
            sum_dxh = sum_dxh + dxh[j];
            sum_dxh_xh = sum_dxh_xh + dxh[j] * xh[j];
        }
        let mean_dxh = sum_dxh / dn;
        let mean_dxh_xh = sum_dxh_xh / dn;
        for j in 0..d {
            gx[r * d + j] = cache.inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (gx, gg, gb)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_C) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `log(softmax(row))` computed as `row - logsumexp(row)`.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    row.iter().map(|&v| v - lse).collect()
}
