//! Built-in procedural corpus in the MVTec directory layout.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::{to_u8, Image};
use crate::rng::{self, derive_seed, tag};
use crate::synth::{synthesize_random, texture::smooth_noise, SynthConfig, TextureBank, TextureKind};

pub const CATEGORIES: [&str; 3] = ["stripes", "checker", "filtered_noise"];

/// Sizes of the generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub image_size: usize,
    pub train: usize,
    pub test_good: usize,
    pub test_anomalous: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { image_size: 128, train: 64, test_good: 20, test_anomalous: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub category: String,
    /// Path relative to the corpus root.
    pub path: String,
    pub mask: Option<String>,
    pub anomalous: bool,
    /// Seed of the anomaly-free image this entry was built from.
    pub base_seed: u64,
    pub mask_area: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub entries: Vec<CorpusEntry>,
}

fn quantize(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = to_u8(*v) as f32 / 255.0);
}

fn palette(r: &mut rng::SeedRng) -> ([f32; 3], [f32; 3]) {
    let a: [f32; 3] = std::array::from_fn(|_| r.random_range(0.15..0.45));
    let b: [f32; 3] = std::array::from_fn(|_| r.random_range(0.55..0.85));
    (a, b)
}

/// Anomaly-free image of a category; category appearance is fixed by `corpus_seed`,
/// per-image variation (phase, offset, noise) by `image_seed`.
pub fn normal_image(category: &str, corpus_seed: u64, image_seed: u64, size: usize) -> Image {
    let mut cat_rng = rng::rng(derive_seed(corpus_seed, &[tag(category)]));
    let (c1, c2) = palette(&mut cat_rng);
    let mut r = rng::rng(image_seed);
    let mut img = Image::filled(size, size, [0.0; 3]);
    let field: Vec<f64> = match category {
        "stripes" => {
            let theta = cat_rng.random_range(0.0..std::f64::consts::PI);
            let period = 12.0;
            let phase = r.random_range(0.0..period);
            let (ct, st) = (theta.cos(), theta.sin());
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    0.5 + 0.5 * (2.0 * std::f64::consts::PI * (x * ct + y * st + phase) / period).sin()
                })
                .collect()
        }
        "checker" => {
            let cell = 16;
            let (oy, ox) = (r.random_range(0..cell), r.random_range(0..cell));
            (0..size * size).map(|i| (((i / size + oy) / cell + (i % size + ox) / cell) % 2) as f64).collect()
        }
        _ => smooth_noise(&mut r, size, size, size / 8),
    };
    let plane = size * size;
    for (i, t) in field.iter().enumerate() {
        for c in 0..3 {
            let grain = r.random_range(-0.03..0.03);
            img.data[c * plane + i] = (c1[c] + (c2[c] - c1[c]) * *t as f32 + grain).clamp(0.0, 1.0);
        }
    }
    quantize(&mut img);
    img
}

/// Synthesis settings for test defects: held-out textures, clearly visible opacity.
pub fn test_defect_config() -> SynthConfig {
    SynthConfig { alpha_min: 0.5, ..SynthConfig::default() }
}

/// Writes the corpus under `out_dir` and returns its manifest (also saved as `manifest.json`).
pub fn make_synth_corpus(out_dir: &Path, seed: u64, spec: CorpusSpec) -> Result<CorpusManifest> {
    let held_out = TextureBank::Procedural(TextureKind::HELD_OUT.to_vec());
    let defect_cfg = test_defect_config();
    let size = spec.image_size;
    let mut entries = Vec::new();
    for cat in CATEGORIES {
        let root = out_dir.join(cat);
        let seed_of = |split: &str, i: usize| derive_seed(seed, &[tag(cat), tag(split), i as u64]);
        let write = |rel: String, img: &Image| -> Result<()> {
            let p = root.join(&rel);
            std::fs::create_dir_all(p.parent().expect("relative path has a parent"))?;
            img.save_png(&p)
        };
        for i in 0..spec.train {
            let s = seed_of("train", i);
            let rel = format!("train/good/{i:03}.png");
            write(rel.clone(), &normal_image(cat, seed, s, size))?;
            entries.push(CorpusEntry { category: cat.into(), path: format!("{cat}/{rel}"), mask: None, anomalous: false, base_seed: s, mask_area: None });
        }
        for i in 0..spec.test_good {
            let s = seed_of("test_good", i);
            let rel = format!("test/good/{i:03}.png");
            write(rel.clone(), &normal_image(cat, seed, s, size))?;
            entries.push(CorpusEntry { category: cat.into(), path: format!("{cat}/{rel}"), mask: None, anomalous: false, base_seed: s, mask_area: None });
        }
        for i in 0..spec.test_anomalous {
            let s = seed_of("test_bad", i);
            let base = normal_image(cat, seed, s, size);
            let mut pair = synthesize_random(&base, &held_out, &defect_cfg, derive_seed(s, &[tag("defect")]))?;
            quantize(&mut pair.image_a);
            let rel = format!("test/synthetic/{i:03}.png");
            let mask_rel = format!("ground_truth/synthetic/{i:03}_mask.png");
            write(rel.clone(), &pair.image_a)?;
            let mp = root.join(&mask_rel);
            std::fs::create_dir_all(mp.parent().expect("mask path has a parent"))?;
            pair.mask.save_png(&mp)?;
            entries.push(CorpusEntry {
                category: cat.into(),
                path: format!("{cat}/{rel}"),
                mask: Some(format!("{cat}/{mask_rel}")),
                anomalous: true,
                base_seed: s,
                mask_area: Some(pair.mask.area_fraction()),
            });
        }
    }
    let manifest = CorpusManifest { seed, spec, entries };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
