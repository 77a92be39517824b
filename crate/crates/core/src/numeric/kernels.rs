//! Forward and backward kernels over flat row-major slices.
//!
//! These are plain functions so the graph layer and the reference oracles in
//! tests can share nothing but the data layout.

use crate::numeric::Real;

/// Output extent of a strided, zero-padded convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `channels×height×width` into a `(channels·k·k)×(out_h·out_w)` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let cols = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back onto the image grid.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, out: &mut [T]) {
    if g.is_pointwise() {
        for (o, c) in out.iter_mut().zip(col) {
            *o = *o + *c;
        }
        return;
    }
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let v = &mut plane[base + ix as usize];
                            *v = *v + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co] = W[co] · col + b[co]` for a standard convolution.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, out_c: usize, g: &ConvGeom) -> Vec<T> {
    let col = im2col(x, g);
    let p = g.col_cols();
    let mut out = vec![T::zero(); out_c * p];
    T::gemm(false, false, out_c, g.col_rows(), p, T::one(), w, &col, T::zero(), &mut out);
    if let Some(b) = b {
        add_channel_bias(&mut out, b, p);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    out_c: usize,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let dw = need.1.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![T::zero(); out_c * rows];
        T::gemm(false, true, out_c, p, rows, T::one(), dout, &col, T::zero(), &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); rows * p];
        T::gemm(true, false, rows, out_c, p, T::one(), w, dout, T::zero(), &mut dcol);
        let mut dx = vec![T::zero(); g.channels * g.height * g.width];
        col2im(&dcol, g, &mut dx);
        dx
    });
    let db = need.2.then(|| channel_sums(dout, out_c, p));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `w` is laid out `in_c × out_c × k × k`; `g` describes the
/// *output* grid as the input of the matching forward convolution (so `g.out_h × g.out_w`
/// is the transposed conv's input extent).
pub fn conv_transpose2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, in_c: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * p];
    T::gemm(true, false, rows, in_c, p, T::one(), w, x, T::zero(), &mut col);
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    col2im(&col, g, &mut out);
    if let Some(b) = b {
        add_channel_bias(&mut out, b, g.height * g.width);
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    in_c: usize,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let dcol = if need.0 || need.1 { im2col(dout, g) } else { Vec::new() };
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); in_c * p];
        T::gemm(false, false, in_c, rows, p, T::one(), w, &dcol, T::zero(), &mut dx);
        dx
    });
    let dw = need.1.then(|| {
        let mut dw = vec![T::zero(); in_c * rows];
        T::gemm(false, true, in_c, p, rows, T::one(), x, &dcol, T::zero(), &mut dw);
        dw
    });
    let db = need.2.then(|| channel_sums(dout, g.channels, g.height * g.width));
    ConvGrads { dx, dw, db }
}

fn add_channel_bias<T: Real>(out: &mut [T], b: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let bc = b[c];
        for v in chunk {
            *v = *v + bc;
        }
    }
}

fn channel_sums<T: Real>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels).map(|c| x[c * plane..(c + 1) * plane].iter().copied().sum()).collect()
}

/// Depthwise causal 1-D convolution over a `len×dim` sequence with a `dim×width` kernel.
/// Tap `width-1` multiplies the current position, tap `j` multiplies position `t-(width-1)+j`.
pub fn causal_conv1d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, len: usize, dim: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * dim];
    for t in 0..len {
        let row = &mut out[t * dim..(t + 1) * dim];
        if let Some(b) = b {
            row.copy_from_slice(b);
        }
        for j in 0..width {
            let shift = width - 1 - j;
            if shift > t {
                continue;
            }
            let src = &x[(t - shift) * dim..(t - shift + 1) * dim];
            for d in 0..dim {
                row[d] = row[d] + w[d * width + j] * src[d];
            }
        }
    }
    out
}

pub fn causal_conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    len: usize,
    dim: usize,
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); len * dim];
    let mut dw = vec![T::zero(); dim * width];
    let mut db = vec![T::zero(); dim];
    for t in 0..len {
        let g = &dout[t * dim..(t + 1) * dim];
        for d in 0..dim {
            db[d] = db[d] + g[d];
        }
        for j in 0..width {
            let shift = width - 1 - j;
            if shift > t {
                continue;
            }
            let s = t - shift;
            for d in 0..dim {
                dw[d * width + j] = dw[d * width + j] + g[d] * x[s * dim + d];
                dx[s * dim + d] = dx[s * dim + d] + g[d] * w[d * width + j];
            }
        }
    }
    (dx, dw, db)
}

/// Per-axis sampling table for half-pixel-center bilinear resizing.
#[derive(Debug, Clone)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        ResizeAxis { lo, hi, frac }
    }
}

pub fn bilinear_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ay = ResizeAxis::new(h, oh);
    let ax = ResizeAxis::new(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::lit(ay.frac[oy]);
            let r0 = &plane[ay.lo[oy] * w..(ay.lo[oy] + 1) * w];
            let r1 = &plane[ay.hi[oy] * w..(ay.hi[oy] + 1) * w];
            for ox in 0..ow {
                let fx = T::lit(ax.frac[ox]);
                let (x0, x1) = (ax.lo[ox], ax.hi[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out[(ch * oh + oy) * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(dout: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return dout.to_vec();
    }
    let ay = ResizeAxis::new(h, oh);
    let ax = ResizeAxis::new(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::lit(ay.frac[oy]);
            for ox in 0..ow {
                let fx = T::lit(ax.frac[ox]);
                let g = dout[(ch * oh + oy) * ow + ox];
                let (x0, x1, y0, y1) = (ax.lo[ox], ax.hi[ox], ay.lo[oy], ay.hi[oy]);
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
            }
        }
    }
    dx
}

/// Normalization statistics for `groups` contiguous runs of `len` elements.
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn normalize_groups<T: Real>(x: &[T], groups: usize, len: usize, eps: T) -> NormStats<T> {
    let n = T::from_usize(len).unwrap();
    let mut xhat = vec![T::zero(); groups * len];
    let mut rstd = vec![T::zero(); groups];
    for gi in 0..groups {
        let seg = &x[gi * len..(gi + 1) * len];
        let rough = seg.iter().copied().sum::<T>() / n;
        // second pass removes the rounding error of the first mean
        let mean = rough + seg.iter().map(|&v| v - rough).sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd[gi] = r;
        for (o, &v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(seg) {
            *o = (v - mean) * r;
        }
    }
    NormStats { xhat, rstd }
}

/// Gradient of `xhat` w.r.t. the raw input, given `dxhat`.
pub fn normalize_groups_backward<T: Real>(stats: &NormStats<T>, dxhat: &[T], groups: usize, len: usize) -> Vec<T> {
    let n = T::from_usize(len).unwrap();
    let mut dx = vec![T::zero(); groups * len];
    for gi in 0..groups {
        let xh = &stats.xhat[gi * len..(gi + 1) * len];
        let g = &dxhat[gi * len..(gi + 1) * len];
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let r = stats.rstd[gi];
        for i in 0..len {
            dx[gi * len + i] = r * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_dim(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_dim(2, 1, 2, 0), Some(3));
        assert_eq!(conv_transpose_out_dim(16, 4, 2, 1), Some(32));
    }

    #[test]
    fn resize_axis_identity() {
        let a = ResizeAxis::new(5, 5);
        assert_eq!(a.lo, vec![0, 1, 2, 3, 4]);
        assert!(a.frac.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(100.0f64), 100.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-50.0f64) > 0.0);
    }
}
