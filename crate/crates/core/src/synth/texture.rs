//! Procedural texture bank used as the foreign-texture source for defects.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::bilinear_forward;
use crate::raster::Image;
use crate::rng::{self, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Checkers,
    BlurredNoise,
    Dots,
    Speckle,
    Gradient,
}

impl TextureKind {
    /// Kinds drawn during training-time synthesis.
    pub const TRAINING: [TextureKind; 3] = [TextureKind::Stripes, TextureKind::Checkers, TextureKind::BlurredNoise];
    /// Kinds reserved for building test anomalies.
    pub const HELD_OUT: [TextureKind; 3] = [TextureKind::Dots, TextureKind::Speckle, TextureKind::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checkers => "checkers",
            TextureKind::BlurredNoise => "blurred_noise",
            TextureKind::Dots => "dots",
            TextureKind::Speckle => "speckle",
            TextureKind::Gradient => "gradient",
        }
    }
}

fn random_color(r: &mut SeedRng) -> [f32; 3] {
    [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn paint(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Image {
    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let c = f(y, x);
            for (ch, v) in c.into_iter().enumerate() {
                img.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Smooth noise: coarse uniform samples bilinearly upsampled to `h×w`.
pub fn smooth_noise(r: &mut SeedRng, h: usize, w: usize, coarse: usize) -> Vec<f64> {
    let (ch, cw) = (coarse.clamp(1, h), coarse.clamp(1, w));
    let grid: Vec<f64> = (0..ch * cw).map(|_| r.random::<f64>()).collect();
    bilinear_forward(&grid, 1, ch, cw, h, w)
}

/// Renders one texture of the given kind with seed-determined colors and scale.
pub fn render(kind: TextureKind, h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let c1 = random_color(&mut r);
    let c2 = random_color(&mut r);
    match kind {
        TextureKind::Stripes => {
            let period = r.random_range(4.0..24.0);
            let theta = r.random_range(0.0..PI);
            let (ct, st) = (theta.cos(), theta.sin());
            paint(h, w, |y, x| {
                let t = 0.5 + 0.5 * (2.0 * PI * (x as f64 * ct + y as f64 * st) / period).sin();
                mix(c1, c2, t as f32)
            })
        }
        TextureKind::Checkers => {
            let cell = r.random_range(4..24usize);
            let (oy, ox) = (r.random_range(0..cell), r.random_range(0..cell));
            paint(h, w, |y, x| if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 { c1 } else { c2 })
        }
        TextureKind::BlurredNoise => {
            let coarse = (h / r.random_range(2..16usize)).max(2);
            let n = smooth_noise(&mut r, h, w, coarse);
            paint(h, w, |y, x| mix(c1, c2, n[y * w + x] as f32))
        }
        TextureKind::Dots => {
            let spacing = r.random_range(6..18usize);
            let radius = r.random_range(1.5..(spacing as f64 / 2.0));
            let jitter: Vec<(f64, f64)> = (0..(h / spacing + 2) * (w / spacing + 2))
                .map(|_| (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect();
            let cols = w / spacing + 2;
            paint(h, w, |y, x| {
                let (gy, gx) = (y / spacing, x / spacing);
                let (jy, jx) = jitter[gy * cols + gx];
                let cy = (gy as f64 + 0.5) * spacing as f64 + jy;
                let cx = (gx as f64 + 0.5) * spacing as f64 + jx;
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= radius {
                    c1
                } else {
                    c2
                }
            })
        }
        TextureKind::Speckle => {
            let density: f64 = r.random_range(0.2..0.6);
            let c3 = random_color(&mut r);
            paint(h, w, |_, _| {
                let u: f64 = r.random();
                if u < density / 2.0 {
                    c1
                } else if u < density {
                    c3
                } else {
                    c2
                }
            })
        }
        TextureKind::Gradient => {
            let theta = r.random_range(0.0..2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            let span = (h.max(w)) as f64;
            paint(h, w, |y, x| {
                let t = 0.5 + (x as f64 * ct + y as f64 * st) / (2.0 * span);
                let grain = r.random_range(-0.05..0.05);
                mix(c1, c2, (t + grain).clamp(0.0, 1.0) as f32)
            })
        }
    }
}

/// Where the foreign texture `A` comes from.
#[derive(Debug, Clone)]
pub enum TextureBank {
    Procedural(Vec<TextureKind>),
    /// Images loaded from a user directory, with their file stems as ids.
    Images(Vec<(String, Image)>),
}

impl Default for TextureBank {
    fn default() -> Self {
        TextureBank::Procedural(TextureKind::TRAINING.to_vec())
    }
}

impl TextureBank {
    /// Loads every decodable raster in a flat directory, resized to `size×size`.
    pub fn from_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for p in paths {
            match Image::load(&p, Some(size)) {
                Ok(img) => images.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), img)),
                Err(e) => log::warn!("skipping texture {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::DataContract(format!("no readable textures in {}", dir.display())));
        }
        Ok(TextureBank::Images(images))
    }

    /// Draws a texture of the requested extent; returns it with its provenance id.
    pub fn draw(&self, h: usize, w: usize, seed: u64) -> (Image, String) {
        let mut r = rng::rng(seed);
        match self {
            TextureBank::Procedural(kinds) => {
                let kind = kinds[r.random_range(0..kinds.len())];
                let sub = r.random::<u64>();
                (render(kind, h, w, sub), format!("{}#{sub:016x}", kind.name()))
            }
            TextureBank::Images(images) => {
                let (id, img) = &images[r.random_range(0..images.len())];
                (img.resized(h, w), id.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_renders_in_range_and_deterministically() {
        for kind in TextureKind::TRAINING.into_iter().chain(TextureKind::HELD_OUT) {
            let a = render(kind, 40, 40, 5);
            assert_eq!(a, render(kind, 40, 40, 5));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
        }
    }

    #[test]
    fn bank_draw_reports_provenance() {
        let (img, id) = TextureBank::default().draw(16, 16, 1);
        assert_eq!(img.height, 16);
        assert!(TextureKind::TRAINING.iter().any(|k| id.starts_with(k.name())));
    }
}
