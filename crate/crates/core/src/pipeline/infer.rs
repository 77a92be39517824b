use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::embed::{FeatureStack, Origin};
use crate::error::{Error, Result};
use crate::frm::AnomalyMap;
use crate::metrics::{average_row, image_score, CategoryAccumulator, CategoryReport};
use crate::mfrm::{scan_forward, ScanDims, ScanInputs};
use crate::numeric::{DType, Real};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::dataset::{load_test_samples, Category, DatasetHandle};
use crate::pipeline::model::Model;
use crate::raster::{to_u8, Image};
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InferOptions {
    pub overlay: bool,
    /// Gaussian blur of the written heatmaps only; scores are never blurred.
    pub blur_sigma: Option<f64>,
}

fn file_id(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(map: &AnomalyMap, sigma: f64) -> AnomalyMap {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (map.height as isize, map.width as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in (-radius..=radius).zip(&kernel) {
                    let (yy, xx) = if horizontal { (y, (x + k).clamp(0, w - 1)) } else { ((y + k).clamp(0, h - 1), x) };
                    acc += wt * src[(yy * w + xx) as usize];
                }
                out[(y * w + x) as usize] = acc / norm;
            }
        }
        out
    };
    let scores = pass(&pass(&map.scores, true), false);
    AnomalyMap { scores, ..map.clone() }
}

pub fn heatmap_gray(map: &AnomalyMap) -> image::GrayImage {
    image::GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        image::Luma([(map.scores[y as usize * map.width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn jet(s: f64) -> [f32; 3] {
    let f = |c: f64| (1.5 - (4.0 * s - c).abs()).clamp(0.0, 1.0) as f32;
    [f(3.0), f(2.0), f(1.0)]
}

pub fn overlay(image: &Image, map: &AnomalyMap) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let col = jet(map.scores[y * map.width + x]);
            for (c, v) in col.into_iter().enumerate() {
                out.set(c, y, x, 0.5 * image.get(c, y, x) + 0.5 * v);
            }
        }
    }
    out
}

/// Scores each image and writes `heatmaps/`, optional `overlays/` and `scores.csv`.
pub fn infer_images<T: Real>(model: &Model<T>, images: &[(String, Image)], out_dir: &Path, opts: InferOptions) -> Result<Vec<(String, f64)>> {
    std::fs::create_dir_all(out_dir.join("heatmaps"))?;
    if opts.overlay {
        std::fs::create_dir_all(out_dir.join("overlays"))?;
    }
    let mut csv = String::from("image_id,image_score\n");
    let mut scores = Vec::new();
    for (id, img) in images {
        let map = model.anomaly_map(img, id)?;
        let score = image_score(&map, model.config.image_score);
        let shown = match opts.blur_sigma {
            Some(s) if s > 0.0 => gaussian_blur(&map, s),
            _ => map.clone(),
        };
        let name = format!("{}.png", file_id(id));
        let p = out_dir.join("heatmaps").join(&name);
        heatmap_gray(&shown).save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        if opts.overlay {
            overlay(img, &shown).save_png(&out_dir.join("overlays").join(&name))?;
        }
        let _ = writeln!(csv, "{id},{score}");
        scores.push((id.clone(), score));
    }
    std::fs::write(out_dir.join("scores.csv"), csv)?;
    Ok(scores)
}

/// Image files of a directory (sorted) or a single file, resized to `size`.
pub fn collect_images(input: &Path, size: usize) -> Result<Vec<(String, Image)>> {
    let paths: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    let mut out = Vec::new();
    for p in paths {
        match Image::load(&p, Some(size)) {
            Ok(img) => out.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), img)),
            Err(e) if input.is_dir() => log::warn!("skipping {e}"),
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::DataContract(format!("no readable images at {}", input.display())));
    }
    Ok(out)
}

/// Pixel and image metrics for one category's test split.
pub fn evaluate_category<T: Real>(model: &Model<T>, cat: &Category) -> Result<CategoryReport> {
    let mut acc = CategoryAccumulator::new(&cat.name, model.config.image_score);
    for s in load_test_samples(cat, model.config.image_size)? {
        let map = model.anomaly_map(&s.image, &s.item.id())?;
        acc.push(&map, s.item.anomalous, s.mask.as_ref().map(|m| m.data.as_slice()))?;
    }
    let report = acc.finish()?;
    if report.skipped > 0 {
        log::warn!("{}: {} anomalous images skipped for missing masks", cat.name, report.skipped);
    }
    Ok(report)
}

/// Dtype recorded in a checkpoint's entries (the first entry decides).
pub fn checkpoint_dtype(ckpt: &Checkpoint) -> DType {
    ckpt.entries.first().map(|e| e.data.dtype()).unwrap_or_default()
}

/// Checkpoint for a category: `<ckpt>/<category>/model.almr` when `ckpt` is a directory.
pub fn category_checkpoint(ckpt: &Path, category: &str) -> PathBuf {
    if ckpt.is_dir() {
        ckpt.join(category).join("model.almr")
    } else {
        ckpt.to_path_buf()
    }
}

/// Reports for every category plus a trailing unweighted `avg` row.
pub fn evaluate(dataset: &DatasetHandle, ckpt: &Path) -> Result<Vec<CategoryReport>> {
    let mut reports = Vec::new();
    for cat in &dataset.categories {
        if cat.test.is_empty() {
            return Err(Error::DataContract(format!("category {} has an empty test split", cat.name)));
        }
        let c = Checkpoint::load(&category_checkpoint(ckpt, &cat.name))?;
        let r = match checkpoint_dtype(&c) {
            DType::F32 => evaluate_category(&Model::<f32>::from_checkpoint(&c, None)?, cat)?,
            DType::F64 => evaluate_category(&Model::<f64>::from_checkpoint(&c, None)?, cat)?,
        };
        reports.push(r);
    }
    if let Some(avg) = average_row(&reports) {
        reports.push(avg);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub runs: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Time of the bare scan kernel at the first block's inner size.
    pub scan_mean_ms: f64,
}

/// Wall-clock latency of the reconstruction module on random features.
pub fn bench_scan<T: Real>(model: &Model<T>, runs: usize, seed: u64) -> Result<BenchReport> {
    let c = &model.config;
    let (ch, grid) = (c.backbone.channels(), c.grid_size);
    let mut r = rng::rng(seed);
    let stack = FeatureStack {
        channels: ch,
        height: grid,
        width: grid,
        data: (0..ch * grid * grid).map(|_| T::lit(r.random::<f64>())).collect(),
        origin: Origin::FInput,
    };
    let runs = runs.max(1);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = model.reconstruct_stack(&stack)?;
        std::hint::black_box(&out);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let dims = ScanDims { len: c.mfrm.tokens(grid), dim: c.mfrm.inner_dim(), state: c.mfrm.state_dim };
    let rand_vec = |r: &mut rng::SeedRng, n: usize, lo: f64, hi: f64| -> Vec<T> { (0..n).map(|_| T::lit(r.random_range(lo..hi))).collect() };
    let u = rand_vec(&mut r, dims.len * dims.dim, -1.0, 1.0);
    let delta = rand_vec(&mut r, dims.len * dims.dim, 0.001, 0.1);
    let a = rand_vec(&mut r, dims.dim * dims.state, -4.0, -0.5);
    let b = rand_vec(&mut r, dims.len * dims.state, -1.0, 1.0);
    let cm = rand_vec(&mut r, dims.len * dims.state, -1.0, 1.0);
    let d = rand_vec(&mut r, dims.dim, -1.0, 1.0);
    let x = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &cm, d_skip: &d };
    let t = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(scan_forward(&x, dims)?);
    }
    let scan_mean_ms = t.elapsed().as_secs_f64() * 1e3 / runs as f64;
    Ok(BenchReport {
        runs,
        mean_ms: times.iter().sum::<f64>() / runs as f64,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(0.0, f64::max),
        scan_mean_ms,
    })
}

/// Quantized grayscale bytes of a map, as written to disk.
pub fn heatmap_bytes(map: &AnomalyMap) -> Vec<u8> {
    map.scores.iter().map(|&s| to_u8(s as f32)).collect()
}
