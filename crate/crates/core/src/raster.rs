//! RGB images and binary masks plus PNG/PPM I/O.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// `3×H×W` planar RGB raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("image", format!("{} values for 3×{height}×{width}", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| to_u8(self.get(c, y as usize, x as usize));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    /// Decodes any supported raster file into [0,1] RGB, resized to `size×size` when given.
    pub fn load(path: &Path, size: Option<usize>) -> Result<Self> {
        audit::record(path);
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let mut rgb = img.to_rgb8();
        if let Some(s) = size {
            if rgb.width() as usize != s || rgb.height() as usize != s {
                rgb = image::imageops::resize(&rgb, s as u32, s as u32, FilterType::Triangle);
            }
        }
        Ok(Image::from_rgb8(&rgb))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Bilinear resize (via the `image` crate) to a new extent.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rgb = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Image::from_rgb8(&rgb)
    }
}

/// Per-thread log of raster files opened, for checking which inputs a stage touched.
pub mod audit {
    use std::cell::RefCell;
    use std::path::{Path, PathBuf};

    thread_local! {
        static LOG: RefCell<Option<Vec<PathBuf>>> = const { RefCell::new(None) };
    }

    /// Starts (or restarts) recording on this thread.
    pub fn start() {
        LOG.with(|l| *l.borrow_mut() = Some(Vec::new()));
    }

    /// Stops recording and returns every path opened since [`start`].
    pub fn take() -> Vec<PathBuf> {
        LOG.with(|l| l.borrow_mut().take().unwrap_or_default())
    }

    pub(crate) fn record(path: &Path) {
        LOG.with(|l| {
            if let Some(v) = l.borrow_mut().as_mut() {
                v.push(path.to_path_buf());
            }
        });
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary `H×W` mask (values 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![1; height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}×{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask", "values must be 0 or 1"));
        }
        Ok(Mask { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Grows the mask by `radius` pixels (square structuring element).
    pub fn dilate(&self, radius: usize) -> Self {
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        out.data[yy * self.width + xx] = 1;
                    }
                }
            }
        }
        out
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Loads a mask, resizing with nearest-neighbour sampling, and binarizes at half of the
    /// 8-bit range.
    pub fn load(path: &Path, size: Option<usize>) -> Result<Self> {
        audit::record(path);
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let mut gray = img.to_luma8();
        if let Some(s) = size {
            if gray.width() as usize != s || gray.height() as usize != s {
                gray = image::imageops::resize(&gray, s as u32, s as u32, FilterType::Nearest);
            }
        }
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let data = gray.pixels().map(|p| u8::from(p[0] >= 128)).collect();
        Ok(Mask { height: h, width: w, data })
    }
}
