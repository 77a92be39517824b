//! Independent reference implementations used as test oracles.
//! Nothing here calls into the library's kernels.
#![allow(dead_code)]

use almrr::numeric::Tensor;
use almrr::rng;

pub fn random_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect()
}

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(seed, n, -1.0, 1.0)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct quadruple-loop convolution.
pub fn conv2d_loop(x: &[f64], xs: [usize; 3], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 3]) {
    let [c, h, w] = xs;
    let [o, ci, kk, _] = ks;
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[(ic * h + iy as usize) * w + ix as usize] * k[((oc * c + ic) * kk + ky) * kk + kx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xo] = s;
            }
        }
    }
    (out, [o, oh, ow])
}

/// Scatter-form transposed convolution with an `in×out×k×k` kernel.
pub fn conv_transpose_loop(x: &[f64], xs: [usize; 3], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 3]) {
    let [ci, h, w] = xs;
    let [ki, co, kk, _] = ks;
    assert_eq!(ci, ki);
    let full_h = (h - 1) * stride + kk;
    let full_w = (w - 1) * stride + kk;
    let mut full = vec![0.0; co * full_h * full_w];
    for i in 0..ci {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(i * h + y) * w + xx];
                for o in 0..co {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            full[(o * full_h + y * stride + ky) * full_w + xx * stride + kx] += v * k[((i * co + o) * kk + ky) * kk + kx];
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                out[(o * oh + y) * ow + xx] = full[(o * full_h + y + pad) * full_w + xx + pad];
            }
        }
    }
    (out, [co, oh, ow])
}

/// `y[t,d] = Σ_j w[d,j]·x[t-(width-1)+j, d]`, zero outside the sequence.
pub fn causal_conv1d_loop(x: &[f64], len: usize, dim: usize, w: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * dim];
    for t in 0..len {
        for d in 0..dim {
            for j in 0..width {
                let src = t as isize - (width as isize - 1) + j as isize;
                if src >= 0 {
                    y[t * dim + d] += w[d * width + j] * x[src as usize * dim + d];
                }
            }
        }
    }
    y
}

/// Plain Adam over a flat vector: returns parameters after each step.
pub fn adam_oracle(p0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    p
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Step-by-step selective-scan recurrence with explicit per-step discretization.
/// Shapes: u, delta `T×Din`; a `Din×N`; b, c `T×N`; dskip `Din`.
#[allow(clippy::too_many_arguments)]
pub fn scan_oracle(u: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], dskip: &[f64], t_len: usize, din: usize, n: usize) -> Vec<f64> {
    let mut h = vec![vec![0.0; n]; din];
    let mut y = vec![0.0; t_len * din];
    for t in 0..t_len {
        for d in 0..din {
            let dt = delta[t * din + d];
            let mut acc = 0.0;
            for s in 0..n {
                let abar = (dt * a[d * n + s]).exp();
                let bbar = dt * b[t * n + s];
                h[d][s] = abar * h[d][s] + bbar * u[t * din + d];
                acc += c[t * n + s] * h[d][s];
            }
            y[t * din + d] = acc + dskip[d] * u[t * din + d];
        }
    }
    y
}

/// Midrank-free pairwise AUROC: P(pos > neg) + ½P(pos = neg).
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Average precision by recomputing precision and recall at every distinct score.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for th in thresholds {
        let mut tp = 0.0;
        let mut pp = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= th {
                pp += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        let precision = tp / pp;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// `x (r×k) · w (k×c)`, row-major.
pub fn matmul(x: &[f64], r: usize, k: usize, w: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|t| x[i * k + t] * w[t * c + j]).sum();
        }
    }
    out
}

fn reverse_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).rev().flat_map(|t| x[t * cols..(t + 1) * cols].to_vec()).collect()
}

/// Named parameters of one bidirectional block, in the library's layouts.
pub struct BlockParams<'a> {
    pub get: &'a dyn Fn(&str) -> Vec<f64>,
}

fn branch_reference(p: &BlockParams, dir: &str, x: &[f64], t_len: usize, din: usize, n: usize, rank: usize, width: usize) -> Vec<f64> {
    let w = (p.get)(&format!("{dir}.conv.weight"));
    let cb = (p.get)(&format!("{dir}.conv.bias"));
    let mut u = causal_conv1d_loop(x, t_len, din, &w, width);
    for t in 0..t_len {
        for d in 0..din {
            u[t * din + d] = silu(u[t * din + d] + cb[d]);
        }
    }
    let b = matmul(&u, t_len, din, &(p.get)(&format!("{dir}.b_proj")), n);
    let c = matmul(&u, t_len, din, &(p.get)(&format!("{dir}.c_proj")), n);
    let low = matmul(&u, t_len, din, &(p.get)(&format!("{dir}.dt_down")), rank);
    let mut delta = matmul(&low, t_len, rank, &(p.get)(&format!("{dir}.dt_up")), din);
    let dt_bias = (p.get)(&format!("{dir}.dt_bias"));
    for t in 0..t_len {
        for d in 0..din {
            delta[t * din + d] = softplus(delta[t * din + d] + dt_bias[d]);
        }
    }
    let a: Vec<f64> = (p.get)(&format!("{dir}.a_log")).iter().map(|v| -v.exp()).collect();
    scan_oracle(&u, &delta, &a, &b, &c, &(p.get)(&format!("{dir}.d_skip")), t_len, din, n)
}

/// Straight-line block: layer norm, x/z projections, forward and reversed selective
/// branches gated by SiLU(z), output projection and residual.
#[allow(clippy::too_many_arguments)]
pub fn mamba_block_reference(p: &BlockParams, tokens: &[f64], t_len: usize, dim: usize, din: usize, n: usize, rank: usize, width: usize) -> Vec<f64> {
    let gain = (p.get)("norm.gain");
    let bias = (p.get)("norm.bias");
    let mut normed = vec![0.0; t_len * dim];
    for t in 0..t_len {
        let row = &tokens[t * dim..(t + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        for d in 0..dim {
            normed[t * dim + d] = (row[d] - mean) / (var + 1e-5).sqrt() * gain[d] + bias[d];
        }
    }
    let x = matmul(&normed, t_len, dim, &(p.get)("in_x"), din);
    let z = matmul(&normed, t_len, dim, &(p.get)("in_z"), din);
    let y_f = branch_reference(p, "fwd", &x, t_len, din, n, rank, width);
    let y_b = reverse_rows(&branch_reference(p, "bwd", &reverse_rows(&x, t_len, din), t_len, din, n, rank, width), t_len, din);
    let mixed: Vec<f64> = (0..t_len * din).map(|i| (y_f[i] + y_b[i]) * silu(z[i])).collect();
    let out = matmul(&mixed, t_len, din, &(p.get)("out"), dim);
    out.iter().zip(tokens).map(|(o, t)| o + t).collect()
}

/// Anti-causal recurrence run from the last step to the first.
#[allow(clippy::too_many_arguments)]
pub fn scan_oracle_reverse(u: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], dskip: &[f64], t_len: usize, din: usize, n: usize) -> Vec<f64> {
    let mut h = vec![vec![0.0; n]; din];
    let mut y = vec![0.0; t_len * din];
    for t in (0..t_len).rev() {
        for d in 0..din {
            let dt = delta[t * din + d];
            let mut acc = 0.0;
            for s in 0..n {
                h[d][s] = (dt * a[d * n + s]).exp() * h[d][s] + dt * b[t * n + s] * u[t * din + d];
                acc += c[t * n + s] * h[d][s];
            }
            y[t * din + d] = acc + dskip[d] * u[t * din + d];
        }
    }
    y
}

/// Replaces every parameter value with a uniform draw in `[lo, hi]`.
pub fn randomize_store(store: &mut almrr::numeric::ParamStore<f64>, seed: u64, lo: f64, hi: f64) {
    let mut r = rng::rng(seed);
    for (_, e) in store.iter_mut() {
        for v in e.tensor.data.iter_mut() {
            *v = rng::uniform(&mut r, lo, hi);
        }
    }
}

/// Adds a uniform draw in `[-amp, amp]` to every parameter, keeping the initial scale
/// while giving zero-initialized weights a nonzero gradient path.
pub fn perturb_store(store: &mut almrr::numeric::ParamStore<f64>, seed: u64, amp: f64) {
    let mut r = rng::rng(seed);
    for (_, e) in store.iter_mut() {
        for v in e.tensor.data.iter_mut() {
            *v += rng::uniform(&mut r, -amp, amp);
        }
    }
}

/// Finite-difference check of `f(binding, extra)` over every trainable store entry and
/// every extra input; the scalar is a fixed random projection of `f`'s output.
pub fn check_store_gradients<F>(
    store: &almrr::numeric::ParamStore<f64>,
    extra: &[Tensor<f64>],
    opts: &almrr::numeric::gradcheck::GradCheckOptions,
    f: F,
) -> almrr::numeric::gradcheck::GradCheckReport
where
    F: for<'g> Fn(&almrr::numeric::Binding<'g, f64>, &[almrr::numeric::Var<'g, f64>]) -> almrr::Result<almrr::numeric::Var<'g, f64>>,
{
    use almrr::numeric::gradcheck::{check_gradients, project};
    let names: Vec<String> = store.names();
    let mut inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let e = store.get(n).unwrap();
            let t = Tensor::new(e.tensor.shape.clone(), e.tensor.data.clone()).unwrap();
            if e.frozen {
                t
            } else {
                t.with_grad()
            }
        })
        .collect();
    inputs.extend(extra.iter().cloned());
    let k = names.len();
    check_gradients(
        &inputs,
        |_, vars| {
            let b = almrr::numeric::Binding::from_pairs(names.iter().cloned().zip(vars[..k].iter().copied()));
            project(f(&b, &vars[k..])?, 99)
        },
        opts,
    )
    .unwrap()
}

/// 1000 scored labels; every third instance has scores quantized to a handful of
/// levels so that ties dominate, and positives are biased upward.
pub fn metric_instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng::rng(seed);
    let levels = [0usize, 3, 11][seed as usize % 3];
    let prevalence = rng::uniform(&mut r, 0.05, 0.6);
    let mut scores = Vec::with_capacity(1000);
    let mut labels = Vec::with_capacity(1000);
    for i in 0..1000 {
        let pos = rng::uniform(&mut r, 0.0, 1.0) < prevalence || i == 0;
        let pos = pos && i != 1;
        let mut s = rng::uniform(&mut r, 0.0, 1.0) + if pos { 0.3 } else { 0.0 };
        if levels > 0 {
            s = (s * levels as f64).floor() / levels as f64;
        }
        scores.push(s);
        labels.push(pos);
    }
    (scores, labels)
}
