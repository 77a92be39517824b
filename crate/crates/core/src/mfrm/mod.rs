//! Feature reconstruction: 1×1 reduce, patch tokens, bidirectional selective-scan
//! blocks, transposed-conv decoder and 1×1 expand.

mod scan;

use serde::{Deserialize, Serialize};

pub use scan::{scan_backward, scan_direction, scan_forward, selective_scan, Direction, ScanDims, ScanInputs};

use crate::error::{Error, Result};
use crate::numeric::{Binding, NormKind, ParamStore, Real, Tensor, Var};
use crate::rng::{self, derive_seed, tag, SeedRng};

/// Token mixer used between patch embedding and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconArch {
    #[default]
    Mamba,
    Conv1,
    Conv3,
    Attention,
}

impl std::str::FromStr for ReconArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mamba" => Ok(ReconArch::Mamba),
            "conv1" => Ok(ReconArch::Conv1),
            "conv3" => Ok(ReconArch::Conv3),
            "attention" => Ok(ReconArch::Attention),
            other => Err(Error::Config(format!("unknown recon_arch {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfrmConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub reduced_channels: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expand_factor: usize,
    pub arch: ReconArch,
}

impl Default for MfrmConfig {
    fn default() -> Self {
        MfrmConfig {
            embed_dim: 192,
            depth: 8,
            patch_size: 4,
            reduced_channels: 192,
            state_dim: 16,
            conv_width: 4,
            expand_factor: 2,
            arch: ReconArch::Mamba,
        }
    }
}

impl MfrmConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand_factor * self.embed_dim
    }

    /// Rank of the low-rank Δ projection.
    pub fn dt_rank(&self) -> usize {
        self.embed_dim.div_ceil(16)
    }

    pub fn validate(&self, channels: usize, grid: usize) -> Result<()> {
        let positive = [self.embed_dim, self.depth, self.patch_size, self.reduced_channels, self.state_dim, self.conv_width, self.expand_factor];
        if positive.contains(&0) {
            return Err(Error::Config(format!("mfrm sizes must be ≥ 1: {self:?}")));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!("patch_size {} must be a power of two", self.patch_size)));
        }
        if grid % self.patch_size != 0 {
            return Err(Error::Config(format!("grid {grid} not divisible by patch_size {}", self.patch_size)));
        }
        if self.reduced_channels > channels {
            return Err(Error::Config(format!("reduced_channels {} exceeds feature channels {channels}", self.reduced_channels)));
        }
        Ok(())
    }

    pub fn tokens(&self, grid: usize) -> usize {
        (grid / self.patch_size).pow(2)
    }
}

const PREFIX: &str = "mfrm";

fn put<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize], data: Vec<T>) -> Result<()> {
    store.insert(name, Tensor::new(shape.to_vec(), data)?, false)
}

fn tn<T: Real>(r: &mut SeedRng, shape: &[usize]) -> Vec<T> {
    rng::trunc_normal(r, shape.iter().product(), 0.02)
}

fn kaiming<T: Real>(r: &mut SeedRng, shape: &[usize], fan_in: usize) -> Vec<T> {
    rng::kaiming_normal(r, shape.iter().product(), fan_in)
}

fn ones<T: Real>(n: usize) -> Vec<T> {
    vec![T::one(); n]
}

/// Adds every reconstruction parameter under `mfrm.*`.
pub fn init_params<T: Real>(cfg: &MfrmConfig, channels: usize, grid: usize, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
    cfg.validate(channels, grid)?;
    let (d, c1, p) = (cfg.embed_dim, cfg.reduced_channels, cfg.patch_size);
    let mut r = rng::rng(derive_seed(seed, &[tag(PREFIX)]));
    put(store, format!("{PREFIX}.reduce.weight"), &[c1, channels, 1, 1], tn(&mut r, &[c1, channels]))?;
    put(store, format!("{PREFIX}.patch.weight"), &[d, c1, p, p], tn(&mut r, &[d, c1, p, p]))?;
    put(store, format!("{PREFIX}.patch.bias"), &[d], vec![T::zero(); d])?;
    put(store, format!("{PREFIX}.pos"), &[cfg.tokens(grid), d], vec![T::zero(); cfg.tokens(grid) * d])?;
    for l in 0..cfg.depth {
        let mut r = rng::rng(derive_seed(seed, &[tag(PREFIX), tag("block"), l as u64]));
        init_block(cfg, &format!("{PREFIX}.blocks.{l}"), store, &mut r)?;
    }
    init_decoder(cfg, channels, store, &mut r)
}

fn init_block<T: Real>(cfg: &MfrmConfig, pre: &str, store: &mut ParamStore<T>, r: &mut SeedRng) -> Result<()> {
    let (d, di) = (cfg.embed_dim, cfg.inner_dim());
    put(store, format!("{pre}.norm.gain"), &[d], ones(d))?;
    put(store, format!("{pre}.norm.bias"), &[d], vec![T::zero(); d])?;
    match cfg.arch {
        ReconArch::Mamba => {
            put(store, format!("{pre}.in_x"), &[d, di], tn(r, &[d, di]))?;
            put(store, format!("{pre}.in_z"), &[d, di], tn(r, &[d, di]))?;
            for dir in ["fwd", "bwd"] {
                init_ssm(cfg, &format!("{pre}.{dir}"), store, r)?;
            }
            put(store, format!("{pre}.out"), &[di, d], tn(r, &[di, d]))
        }
        ReconArch::Conv1 => {
            put(store, format!("{pre}.fc1.weight"), &[d, di], tn(r, &[d, di]))?;
            put(store, format!("{pre}.fc1.bias"), &[di], vec![T::zero(); di])?;
            put(store, format!("{pre}.out"), &[di, d], tn(r, &[di, d]))
        }
        ReconArch::Conv3 => {
            put(store, format!("{pre}.conv.weight"), &[d, d, 3, 3], tn(r, &[d, d, 3, 3]))?;
            put(store, format!("{pre}.conv.bias"), &[d], vec![T::zero(); d])?;
            put(store, format!("{pre}.out"), &[d, d], tn(r, &[d, d]))
        }
        ReconArch::Attention => {
            for name in ["q", "k", "v"] {
                put(store, format!("{pre}.{name}"), &[d, d], tn(r, &[d, d]))?;
            }
            put(store, format!("{pre}.out"), &[d, d], tn(r, &[d, d]))
        }
    }
}

fn init_ssm<T: Real>(cfg: &MfrmConfig, pre: &str, store: &mut ParamStore<T>, r: &mut SeedRng) -> Result<()> {
    let (di, n, w, rank) = (cfg.inner_dim(), cfg.state_dim, cfg.conv_width, cfg.dt_rank());
    let bound = 1.0 / (w as f64).sqrt();
    let conv = (0..di * w).map(|_| T::lit(rng::uniform(r, -bound, bound))).collect();
    put(store, format!("{pre}.conv.weight"), &[di, w], conv)?;
    put(store, format!("{pre}.conv.bias"), &[di], vec![T::zero(); di])?;
    put(store, format!("{pre}.b_proj"), &[di, n], tn(r, &[di, n]))?;
    put(store, format!("{pre}.c_proj"), &[di, n], tn(r, &[di, n]))?;
    put(store, format!("{pre}.dt_down"), &[di, rank], tn(r, &[di, rank]))?;
    put(store, format!("{pre}.dt_up"), &[rank, di], tn(r, &[rank, di]))?;
    // Δ at init is log-uniform in [1e-3, 0.1]; the bias is its inverse softplus.
    let dt_bias = (0..di)
        .map(|_| {
            let dt = (rng::uniform(r, (1e-3f64).ln(), (0.1f64).ln())).exp();
            T::lit(dt + (-(-dt).exp_m1()).ln())
        })
        .collect();
    put(store, format!("{pre}.dt_bias"), &[di], dt_bias)?;
    let a_log = (0..di).flat_map(|_| (1..=n).map(|k| T::lit((k as f64).ln()))).collect();
    put(store, format!("{pre}.a_log"), &[di, n], a_log)?;
    put(store, format!("{pre}.d_skip"), &[di], ones(di))
}

/// Transposed-conv decoder stages: (in, out, kernel, stride, pad).
pub fn decoder_layers(cfg: &MfrmConfig) -> Vec<(usize, usize, usize, usize, usize)> {
    let ups = cfg.patch_size.trailing_zeros() as usize;
    let (d, c1) = (cfg.embed_dim, cfg.reduced_channels);
    let mut layers = Vec::new();
    for i in 0..ups {
        let out = if i + 1 == ups { c1 } else { d };
        layers.push((d, out, 4, 2, 1));
    }
    let last_in = if ups == 0 { d } else { c1 };
    layers.push((last_in, c1, 3, 1, 1));
    layers
}

fn init_decoder<T: Real>(cfg: &MfrmConfig, channels: usize, store: &mut ParamStore<T>, r: &mut SeedRng) -> Result<()> {
    let layers = decoder_layers(cfg);
    let last = layers.len() - 1;
    for (i, &(ic, oc, k, s, _)) in layers.iter().enumerate() {
        let pre = format!("{PREFIX}.dec{i}");
        // Each output pixel of a strided transposed conv sees ic·(k/s)² taps.
        let fan_in = ic * (k / s).pow(2);
        put(store, format!("{pre}.weight"), &[ic, oc, k, k], kaiming(r, &[ic, oc, k, k], fan_in))?;
        put(store, format!("{pre}.bias"), &[oc], vec![T::zero(); oc])?;
        if i != last {
            put(store, format!("{pre}.norm.gain"), &[oc], ones(oc))?;
            put(store, format!("{pre}.norm.bias"), &[oc], vec![T::zero(); oc])?;
        }
    }
    let c1 = cfg.reduced_channels;
    put(store, format!("{PREFIX}.expand.weight"), &[channels, c1, 1, 1], tn(r, &[channels, c1]))?;
    put(store, format!("{PREFIX}.expand.bias"), &[channels], vec![T::zero(); channels])
}

/// 1×1 convolution without bias, `C×H×W → C1×H×W`.
pub fn reduce<'g, T: Real>(b: &Binding<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    f.conv2d(b.get(&format!("{PREFIX}.reduce.weight"))?, None, 1, 0)
}

/// 1×1 convolution with bias, `C1×H×W → C×H×W`.
pub fn expand<'g, T: Real>(b: &Binding<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    f.conv2d(b.get(&format!("{PREFIX}.expand.weight"))?, Some(b.get(&format!("{PREFIX}.expand.bias"))?), 1, 0)
}

/// Non-overlapping `p×p` projection to `T×D` tokens in row-major patch order, plus position embedding.
pub fn patch_embed<'g, T: Real>(cfg: &MfrmConfig, b: &Binding<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let p = cfg.patch_size;
    let grid = f.shape();
    if grid.len() != 3 || grid[1] % p != 0 || grid[2] % p != 0 {
        return Err(Error::shape("patch_embed", format!("{grid:?} not divisible into {p}×{p} patches")));
    }
    let x = f.conv2d(b.get(&format!("{PREFIX}.patch.weight"))?, Some(b.get(&format!("{PREFIX}.patch.bias"))?), p, 0)?;
    let [d, h, w] = x.shape()[..] else { unreachable!() };
    let tokens = x.reshape(&[d, h * w])?.transpose()?;
    tokens.add(b.get(&format!("{PREFIX}.pos"))?)
}

/// Per-direction branch: causal conv, SiLU, input-dependent B/C/Δ, scan.
fn ssm_branch<'g, T: Real>(b: &Binding<'g, T>, pre: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let u = x.causal_conv1d(b.at(pre, "conv.weight")?, Some(b.at(pre, "conv.bias")?))?.silu();
    let bm = u.linear(b.at(pre, "b_proj")?, None)?;
    let cm = u.linear(b.at(pre, "c_proj")?, None)?;
    let delta = u.linear(b.at(pre, "dt_down")?, None)?.linear(b.at(pre, "dt_up")?, Some(b.at(pre, "dt_bias")?))?.softplus();
    let a = b.at(pre, "a_log")?.exp().scale(T::lit(-1.0));
    selective_scan(u, delta, a, bm, cm, b.at(pre, "d_skip")?)
}

/// One bidirectional block; `tokens` is `T×D`.
pub fn mamba_block<'g, T: Real>(b: &Binding<'g, T>, pre: &str, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
    let normed = tokens.normalize(NormKind::Layer, Some(b.at(pre, "norm.gain")?), Some(b.at(pre, "norm.bias")?))?;
    let x = normed.linear(b.at(pre, "in_x")?, None)?;
    let gate = normed.linear(b.at(pre, "in_z")?, None)?.silu();
    let y_fwd = ssm_branch(b, &format!("{pre}.fwd"), x)?;
    let y_bwd = ssm_branch(b, &format!("{pre}.bwd"), x.reverse_rows()?)?.reverse_rows()?;
    let mixed = y_fwd.mul(gate)?.add(y_bwd.mul(gate)?)?;
    mixed.linear(b.at(pre, "out")?, None)?.add(tokens)
}

fn conv1_block<'g, T: Real>(b: &Binding<'g, T>, pre: &str, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
    let normed = tokens.normalize(NormKind::Layer, Some(b.at(pre, "norm.gain")?), Some(b.at(pre, "norm.bias")?))?;
    let hidden = normed.linear(b.at(pre, "fc1.weight")?, Some(b.at(pre, "fc1.bias")?))?.silu();
    hidden.linear(b.at(pre, "out")?, None)?.add(tokens)
}

fn conv3_block<'g, T: Real>(b: &Binding<'g, T>, pre: &str, tokens: Var<'g, T>, side: usize) -> Result<Var<'g, T>> {
    let normed = tokens.normalize(NormKind::Layer, Some(b.at(pre, "norm.gain")?), Some(b.at(pre, "norm.bias")?))?;
    let d = normed.shape()[1];
    let grid = normed.transpose()?.reshape(&[d, side, side])?;
    let conv = grid.conv2d(b.at(pre, "conv.weight")?, Some(b.at(pre, "conv.bias")?), 1, 1)?.silu();
    let back = conv.reshape(&[d, side * side])?.transpose()?;
    back.linear(b.at(pre, "out")?, None)?.add(tokens)
}

fn attention_block<'g, T: Real>(b: &Binding<'g, T>, pre: &str, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
    let normed = tokens.normalize(NormKind::Layer, Some(b.at(pre, "norm.gain")?), Some(b.at(pre, "norm.bias")?))?;
    let d = normed.shape()[1];
    let q = normed.linear(b.at(pre, "q")?, None)?;
    let k = normed.linear(b.at(pre, "k")?, None)?;
    let v = normed.linear(b.at(pre, "v")?, None)?;
    let scores = q.matmul(k.transpose()?)?.scale(T::lit(1.0 / (d as f64).sqrt()));
    let attended = scores.softmax_rows()?.matmul(v)?;
    attended.linear(b.at(pre, "out")?, None)?.add(tokens)
}

/// Upsamples `D×h×w` latents by the patch size to `C1×(h·p)×(w·p)`.
pub fn decode<'g, T: Real>(cfg: &MfrmConfig, b: &Binding<'g, T>, lat: Var<'g, T>) -> Result<Var<'g, T>> {
    let layers = decoder_layers(cfg);
    let last = layers.len() - 1;
    let mut x = lat;
    for (i, &(_, _, _, s, pad)) in layers.iter().enumerate() {
        let pre = format!("{PREFIX}.dec{i}");
        x = x.conv_transpose2d(b.at(&pre, "weight")?, Some(b.at(&pre, "bias")?), s, pad)?;
        x = if i == last {
            x.tanh()
        } else {
            x.normalize(NormKind::Instance, Some(b.at(&pre, "norm.gain")?), Some(b.at(&pre, "norm.bias")?))?.relu()
        };
    }
    Ok(x)
}

/// Runs the configured token mixer over all blocks.
pub fn mix_tokens<'g, T: Real>(cfg: &MfrmConfig, b: &Binding<'g, T>, tokens: Var<'g, T>, side: usize) -> Result<Var<'g, T>> {
    let mut t = tokens;
    for l in 0..cfg.depth {
        let pre = format!("{PREFIX}.blocks.{l}");
        t = match cfg.arch {
            ReconArch::Mamba => mamba_block(b, &pre, t)?,
            ReconArch::Conv1 => conv1_block(b, &pre, t)?,
            ReconArch::Conv3 => conv3_block(b, &pre, t, side)?,
            ReconArch::Attention => attention_block(b, &pre, t)?,
        };
    }
    Ok(t)
}

/// `C×H0×W0 → C×H0×W0` reconstruction.
pub fn mfrm_forward<'g, T: Real>(cfg: &MfrmConfig, b: &Binding<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = f.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape("mfrm_forward", format!("expected C×H×W, got {shape:?}")));
    };
    if h != w {
        return Err(Error::shape("mfrm_forward", format!("grid must be square, got {h}×{w}")));
    }
    cfg.validate(c, h)?;
    let side = h / cfg.patch_size;
    let tokens = patch_embed(cfg, b, reduce(b, f)?)?;
    let mixed = mix_tokens(cfg, b, tokens, side)?;
    let lat = mixed.transpose()?.reshape(&[cfg.embed_dim, side, side])?;
    expand(b, decode(cfg, b, lat)?)
}
