use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::rng::{self, derive_seed};
use crate::synth::perlin::{sample_mask, AreaBounds};
use crate::synth::texture::TextureBank;

/// A synthesized anomalous image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub image_a: Image,
    pub mask: Mask,
    pub alpha: f32,
    pub source_texture_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub alpha_min: f32,
    pub alpha_max: f32,
    /// Perlin lattice resolutions drawn independently per axis.
    pub resolutions: Vec<usize>,
    pub threshold: f64,
    pub area: AreaBounds,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { alpha_min: 0.15, alpha_max: 1.0, resolutions: vec![2, 4, 8, 16], threshold: 0.5, area: AreaBounds::default() }
    }
}

thread_local! {
    static SYNTH_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`synthesize`] calls made on the current thread.
pub fn synth_call_count() -> u64 {
    SYNTH_CALLS.with(|c| c.get())
}

/// `I_a = (1-M)⊙I + (1-α)(M⊙I) + α(M⊙A)`, evaluated term by term.
pub fn synthesize(image: &Image, texture: &Image, mask: &Mask, alpha: f32) -> Result<SynthPair> {
    if texture.height != image.height || texture.width != image.width {
        return Err(Error::shape("synthesize", format!(
            "texture {}×{} vs image {}×{}",
            texture.height, texture.width, image.height, image.width
        )));
    }
    if mask.height != image.height || mask.width != image.width {
        return Err(Error::shape("synthesize", format!(
            "mask {}×{} vs image {}×{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("synthesize", format!("alpha {alpha} outside (0, 1]")));
    }
    SYNTH_CALLS.with(|c| c.set(c.get() + 1));
    let plane = image.plane();
    let mut out = image.clone();
    for ch in 0..3 {
        for p in 0..plane {
            let m = mask.data[p] as f32;
            let i = image.data[ch * plane + p];
            let a = texture.data[ch * plane + p];
            let v = (1.0 - m) * i + (1.0 - alpha) * (m * i) + alpha * (m * a);
            out.data[ch * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(SynthPair { image_a: out, mask: mask.clone(), alpha, source_texture_id: String::new() })
}

/// Draws texture, lattice resolution, mask and opacity from one seed and applies them.
pub fn synthesize_random(image: &Image, bank: &TextureBank, cfg: &SynthConfig, seed: u64) -> Result<SynthPair> {
    let (h, w) = (image.height, image.width);
    let mut r = rng::rng(derive_seed(seed, &[0]));
    let usable: Vec<usize> = cfg.resolutions.iter().copied().filter(|&s| s <= h.min(w)).collect();
    if usable.is_empty() {
        return Err(Error::Config(format!("no Perlin resolution fits a {h}×{w} image")));
    }
    let res = (usable[r.random_range(0..usable.len())], usable[r.random_range(0..usable.len())]);
    let alpha = if cfg.alpha_max > cfg.alpha_min { r.random_range(cfg.alpha_min..=cfg.alpha_max) } else { cfg.alpha_max };
    let (mask, _) = sample_mask(h, w, res, cfg.threshold, cfg.area, derive_seed(seed, &[1]))?;
    let (texture, id) = bank.draw(h, w, derive_seed(seed, &[2]));
    let mut pair = synthesize(image, &texture, &mask, alpha)?;
    pair.source_texture_id = id;
    Ok(pair)
}
