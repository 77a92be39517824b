//! Refinement head: channel means of the input and reconstructed stacks
//! through a small U-Net, upsampled to image resolution.

use serde::{Deserialize, Serialize};

use crate::embed::FeatureStack;
use crate::error::{Error, Result};
use crate::numeric::{concat, Binding, ParamStore, Real, Tensor, Var};
use crate::rng::{self, derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrmConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for FrmConfig {
    fn default() -> Self {
        FrmConfig { depth: 3, base_channels: 32 }
    }
}

impl FrmConfig {
    pub fn validate(&self, grid: usize, image: usize) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("frm depth and base_channels must be ≥ 1: {self:?}")));
        }
        if grid % (1 << (self.depth - 1)) != 0 {
            return Err(Error::Config(format!("grid {grid} not divisible by 2^(depth-1) for depth {}", self.depth)));
        }
        if image % grid != 0 || !(image / grid).is_power_of_two() {
            return Err(Error::Config(format!("image size {image} must be a power-of-two multiple of grid {grid}")));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Per-pixel scores in `[0, 1]` at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub source_image_id: String,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>, source_image_id: impl Into<String>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::shape("anomaly_map", format!("{} scores for {height}×{width}", scores.len())));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Numerical(format!("anomaly score {bad} outside [0, 1]")));
        }
        Ok(AnomalyMap { height, width, scores, source_image_id: source_image_id.into() })
    }
}

const PREFIX: &str = "frm";

fn conv_param<T: Real>(store: &mut ParamStore<T>, r: &mut rng::SeedRng, name: &str, ic: usize, oc: usize, k: usize, transposed: bool) -> Result<()> {
    // every transposed conv here has stride 2, so each output pixel sees ic·(k/2)² taps
    let (shape, fan_in) = if transposed { ([ic, oc, k, k], ic * (k / 2).pow(2)) } else { ([oc, ic, k, k], ic * k * k) };
    let w = rng::kaiming_normal(r, oc * ic * k * k, fan_in);
    store.insert(format!("{PREFIX}.{name}.weight"), Tensor::new(shape.to_vec(), w)?, false)?;
    store.insert(format!("{PREFIX}.{name}.bias"), Tensor::zeros(&[oc]), false)
}

/// Number of ×2 upsampling stages after the U-Net body.
pub fn head_upsamples(grid: usize, image: usize) -> usize {
    (image / grid).trailing_zeros() as usize
}

/// Adds every refinement parameter under `frm.*`.
pub fn init_params<T: Real>(cfg: &FrmConfig, grid: usize, image: usize, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
    cfg.validate(grid, image)?;
    let mut r = rng::rng(derive_seed(seed, &[tag(PREFIX)]));
    let mut ic = 2;
    for l in 0..cfg.depth {
        let ch = cfg.width(l);
        conv_param(store, &mut r, &format!("enc{l}.a"), ic, ch, 3, false)?;
        conv_param(store, &mut r, &format!("enc{l}.b"), ch, ch, 3, false)?;
        ic = ch;
    }
    for l in (0..cfg.depth.saturating_sub(1)).rev() {
        let ch = cfg.width(l);
        conv_param(store, &mut r, &format!("dec{l}.up"), cfg.width(l + 1), ch, 2, true)?;
        conv_param(store, &mut r, &format!("dec{l}.a"), 2 * ch, ch, 3, false)?;
        conv_param(store, &mut r, &format!("dec{l}.b"), ch, ch, 3, false)?;
    }
    let base = cfg.base_channels;
    for u in 0..head_upsamples(grid, image) {
        conv_param(store, &mut r, &format!("head{u}"), base, base, 4, true)?;
    }
    conv_param(store, &mut r, "final", base, 1, 1, false)
}

fn conv_relu<'g, T: Real>(b: &Binding<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let pre = format!("{PREFIX}.{name}");
    Ok(x.conv2d(b.at(&pre, "weight")?, Some(b.at(&pre, "bias")?), 1, 1)?.relu())
}

/// Maps two `1×H0×W0` channel means to a `1×H×W` score map (before sigmoid when `logits`).
pub fn refine_logits<'g, T: Real>(
    cfg: &FrmConfig,
    b: &Binding<'g, T>,
    mean_f: Var<'g, T>,
    mean_fhat: Var<'g, T>,
    image: usize,
) -> Result<Var<'g, T>> {
    let (sf, sh) = (mean_f.shape(), mean_fhat.shape());
    if sf != sh || sf.len() != 3 || sf[0] != 1 {
        return Err(Error::shape("refine", format!("channel means {sf:?} and {sh:?} must both be 1×H×W")));
    }
    let grid = sf[1];
    cfg.validate(grid, image)?;
    let mut x = concat(&[mean_f, mean_fhat])?;
    let mut skips = Vec::new();
    for l in 0..cfg.depth {
        if l > 0 {
            x = x.max_pool2()?;
        }
        x = conv_relu(b, &format!("enc{l}.b"), conv_relu(b, &format!("enc{l}.a"), x)?)?;
        skips.push(x);
    }
    skips.pop();
    for l in (0..cfg.depth.saturating_sub(1)).rev() {
        let pre = format!("{PREFIX}.dec{l}.up");
        let up = x.conv_transpose2d(b.at(&pre, "weight")?, Some(b.at(&pre, "bias")?), 2, 0)?.relu();
        let joined = concat(&[up, skips.pop().expect("one skip per level")])?;
        x = conv_relu(b, &format!("dec{l}.b"), conv_relu(b, &format!("dec{l}.a"), joined)?)?;
    }
    for u in 0..head_upsamples(grid, image) {
        let pre = format!("{PREFIX}.head{u}");
        x = x.conv_transpose2d(b.at(&pre, "weight")?, Some(b.at(&pre, "bias")?), 2, 1)?.relu();
    }
    let pre = format!("{PREFIX}.final");
    x.conv2d(b.at(&pre, "weight")?, Some(b.at(&pre, "bias")?), 1, 0)
}

/// Concatenation order is fixed: `mean_f` first, `mean_fhat` second.
pub fn refine<'g, T: Real>(
    cfg: &FrmConfig,
    b: &Binding<'g, T>,
    mean_f: Var<'g, T>,
    mean_fhat: Var<'g, T>,
    image: usize,
) -> Result<Var<'g, T>> {
    Ok(refine_logits(cfg, b, mean_f, mean_fhat, image)?.sigmoid())
}

/// Arithmetic mean over channels of a stack, `1×H0×W0` flattened.
pub fn channel_mean<T: Real>(stack: &FeatureStack<T>) -> Result<Vec<T>> {
    if stack.channels == 0 {
        return Err(Error::shape("channel_mean", "stack has no channels"));
    }
    let plane = stack.height * stack.width;
    let inv = T::one() / T::from_usize(stack.channels).unwrap();
    Ok((0..plane).map(|i| (0..stack.channels).map(|c| stack.data[c * plane + i]).sum::<T>() * inv).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Graph;

    #[test]
    fn shapes_and_zero_final_layer() {
        let cfg = FrmConfig { depth: 3, base_channels: 4 };
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, 16, 64, &mut store, 3).unwrap();
        for name in ["frm.final.weight", "frm.final.bias"] {
            store.get_mut(name).unwrap().tensor.data.fill(0.0);
        }
        let g = Graph::new();
        let b = store.bind(&g);
        let m = g.constant(&[1, 16, 16], (0..256).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = refine(&cfg, &b, m, m.scale(0.5), 64).unwrap();
        assert_eq!(out.shape(), vec![1, 64, 64]);
        assert!(out.value().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = FrmConfig { depth: 2, base_channels: 2 };
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, 8, 8, &mut store, 0).unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let a = g.constant(&[1, 8, 8], vec![0.0; 64]).unwrap();
        let c = g.constant(&[1, 4, 4], vec![0.0; 16]).unwrap();
        assert!(refine(&cfg, &b, a, c, 8).is_err());
    }

    #[test]
    fn channel_mean_of_two_levels() {
        let s = FeatureStack { channels: 2, height: 1, width: 2, data: vec![0.0, 0.0, 2.0, 2.0], origin: crate::embed::Origin::Phi };
        assert_eq!(channel_mean(&s).unwrap(), vec![1.0, 1.0]);
    }
}
