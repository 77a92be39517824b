//! Lattice gradient noise and blob masks derived from it.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::rng::{self, derive_seed};

/// Perlin noise over an `H×W` grid, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PerlinField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Lattice cells along (height, width).
    pub lattice_resolution: (usize, usize),
    pub seed: u64,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Classic gradient noise with quintic fade. When a resolution does not divide its
/// axis, the field is generated on the next multiple and cropped.
pub fn perlin(height: usize, width: usize, resolution: (usize, usize), seed: u64) -> Result<PerlinField> {
    let (rh, rw) = resolution;
    if rh == 0 || rw == 0 {
        return Err(Error::invalid("perlin", "lattice resolution must be ≥ 1"));
    }
    if height < rh || width < rw {
        return Err(Error::invalid("perlin", format!("grid {height}×{width} smaller than resolution {rh}×{rw}")));
    }
    let cell_h = height.div_ceil(rh);
    let cell_w = width.div_ceil(rw);
    let mut r = rng::rng(seed);
    let grads: Vec<(f64, f64)> = (0..(rh + 1) * (rw + 1))
        .map(|_| {
            let theta = 2.0 * PI * r.random::<f64>();
            (theta.cos(), theta.sin())
        })
        .collect();
    let grad = |gy: usize, gx: usize| grads[gy * (rw + 1) + gx];
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (gy, fy) = (y / cell_h, (y % cell_h) as f64 / cell_h as f64);
        let v = fade(fy);
        for x in 0..width {
            let (gx, fx) = (x / cell_w, (x % cell_w) as f64 / cell_w as f64);
            let u = fade(fx);
            let dot = |g: (f64, f64), dy: f64, dx: f64| g.0 * dy + g.1 * dx;
            let n00 = dot(grad(gy, gx), fy, fx);
            let n10 = dot(grad(gy + 1, gx), fy - 1.0, fx);
            let n01 = dot(grad(gy, gx + 1), fy, fx - 1.0);
            let n11 = dot(grad(gy + 1, gx + 1), fy - 1.0, fx - 1.0);
            let val = lerp(lerp(n00, n01, u), lerp(n10, n11, u), v) * SQRT_2;
            values.push(val.clamp(-1.0, 1.0));
        }
    }
    Ok(PerlinField { height, width, values, lattice_resolution: resolution, seed })
}

impl PerlinField {
    /// Field divided by its maximum absolute value.
    pub fn max_abs_normalized(&self) -> PerlinField {
        let m = self.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let mut out = self.clone();
        if m > 0.0 {
            out.values.iter_mut().for_each(|v| *v /= m);
        }
        out
    }
}

/// `1` where the field is at or above `threshold`.
pub fn binarize(field: &PerlinField, threshold: f64) -> Result<Mask> {
    if !(threshold >= -1.0 && threshold < 1.0) {
        return Err(Error::invalid("binarize", format!("threshold {threshold} outside [-1, 1)")));
    }
    let data = field.values.iter().map(|&v| u8::from(v >= threshold)).collect();
    Ok(Mask { height: field.height, width: field.width, data })
}

/// Acceptable anomaly area fractions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AreaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for AreaBounds {
    fn default() -> Self {
        AreaBounds { min: 0.001, max: 0.30 }
    }
}

pub const MAX_MASK_TRIES: usize = 10;

/// Draws a thresholded, max-abs-normalized Perlin mask whose area lies within `bounds`,
/// resampling with derived seeds. Returns the mask and the number of tries used.
pub fn sample_mask(
    height: usize,
    width: usize,
    resolution: (usize, usize),
    threshold: f64,
    bounds: AreaBounds,
    seed: u64,
) -> Result<(Mask, usize)> {
    let mut last = 0.0;
    for attempt in 0..MAX_MASK_TRIES {
        let s = if attempt == 0 { seed } else { derive_seed(seed, &[attempt as u64]) };
        let field = perlin(height, width, resolution, s)?.max_abs_normalized();
        let mask = binarize(&field, threshold)?;
        last = mask.area_fraction();
        if last >= bounds.min && last <= bounds.max {
            return Ok((mask, attempt + 1));
        }
    }
    Err(Error::MaskSampling { tries: MAX_MASK_TRIES, last_fraction: last })
}
