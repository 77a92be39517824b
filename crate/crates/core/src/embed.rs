//! Frozen multi-scale feature extractor shared by both branches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::{bilinear_forward, conv2d_forward, conv_out_dim, ConvGeom};
use crate::numeric::{ParamStore, Real, Tensor};
use crate::raster::Image;
use crate::rng::{self, derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsSource {
    BuiltinRandom { seed: u64 },
    /// Backbone entries are imported from another checkpoint at build time.
    Checkpoint { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub stage_channels: Vec<usize>,
    /// Cumulative stride of each stage relative to the input.
    pub stage_strides: Vec<usize>,
    /// Stage indices concatenated into the feature stack, in order.
    pub selected: Vec<usize>,
    pub weights_source: WeightsSource,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl BackboneSpec {
    /// Three 3×3 stride-2 stages with 16/32/64 channels.
    pub fn tinytex(seed: u64) -> Self {
        BackboneSpec {
            name: "tinytex".into(),
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 4, 8],
            selected: vec![0, 1, 2],
            weights_source: WeightsSource::BuiltinRandom { seed },
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Stage geometry of the first three residual blocks of a ResNet-50.
    pub fn resnet50_like(seed: u64) -> Self {
        BackboneSpec {
            name: "resnet50_like".into(),
            stage_channels: vec![256, 512, 1024],
            stage_strides: vec![4, 8, 16],
            selected: vec![0, 1, 2],
            weights_source: WeightsSource::BuiltinRandom { seed },
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "tinytex" => Ok(Self::tinytex(seed)),
            "resnet50_like" | "resnet50-like" => Ok(Self::resnet50_like(seed)),
            other => Err(Error::Config(format!("unknown backbone profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if !(2..=4).contains(&n) || self.stage_strides.len() != n {
            return Err(Error::Config(format!(
                "backbone needs 2..=4 stages with one stride each, got {n} channels / {} strides",
                self.stage_strides.len()
            )));
        }
        let mut prev = 1;
        for &s in &self.stage_strides {
            if s < prev || s % prev != 0 {
                return Err(Error::Config(format!("stage strides {:?} are not a divisor chain", self.stage_strides)));
            }
            prev = s;
        }
        if self.selected.is_empty() || self.selected.iter().any(|&i| i >= n) {
            return Err(Error::Config(format!("selected stages {:?} out of range for {n} stages", self.selected)));
        }
        if self.std.iter().any(|&s| s <= 0.0) || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone std and channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the concatenated stack.
    pub fn channels(&self) -> usize {
        self.selected.iter().map(|&i| self.stage_channels[i]).sum()
    }

    fn deepest_used(&self) -> usize {
        self.selected.iter().copied().max().unwrap_or(0)
    }

    pub fn deepest_stride(&self) -> usize {
        self.stage_strides[self.deepest_used()]
    }

    /// (kernel, stride, pad) of stage `i`: 3×3/pad 1 for a ×2 step, k = s otherwise.
    fn stage_geometry(&self, i: usize) -> (usize, usize) {
        let prev = if i == 0 { 1 } else { self.stage_strides[i - 1] };
        let step = self.stage_strides[i] / prev;
        match step {
            1 => (3, 1),
            2 => (3, 2),
            s => (s, s),
        }
    }

    fn stage_pad(&self, i: usize) -> usize {
        match self.stage_geometry(i) {
            (3, _) => 1,
            _ => 0,
        }
    }

    /// Adds Kaiming-initialized frozen stage weights under `backbone.*`.
    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.validate()?;
        let seed = match &self.weights_source {
            WeightsSource::BuiltinRandom { seed } => *seed,
            WeightsSource::Checkpoint { path } => {
                return Err(Error::Config(format!("backbone weights must be imported from {path}")));
            }
        };
        let mut in_c = 3;
        for (i, &out_c) in self.stage_channels.iter().enumerate() {
            let (k, _) = self.stage_geometry(i);
            let mut r = rng::rng(derive_seed(seed, &[tag("backbone"), i as u64]));
            let fan_in = in_c * k * k;
            let w = rng::kaiming_normal(&mut r, out_c * fan_in, fan_in);
            store.insert(format!("backbone.stage{i}.weight"), Tensor::new(vec![out_c, in_c, k, k], w)?, true)?;
            store.insert(format!("backbone.stage{i}.bias"), Tensor::zeros(&[out_c]), true)?;
            in_c = out_c;
        }
        Ok(())
    }
}

/// Which branch or module a stack came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Phi,
    FInput,
    FHat,
}

/// `C×H0×W0` dense features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub origin: Origin,
}

impl<T: Real> FeatureStack<T> {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One `C×H×W` map per stage up to the deepest selected one.
pub fn backbone_forward<T: Real>(spec: &BackboneSpec, params: &ParamStore<T>, image: &Image) -> Result<Vec<Tensor<T>>> {
    spec.validate()?;
    let deepest = spec.deepest_stride();
    if image.height % deepest != 0 || image.width % deepest != 0 {
        return Err(Error::shape(
            "backbone_forward",
            format!("input {}×{} is not a multiple of stride {deepest}", image.height, image.width),
        ));
    }
    let plane = image.plane();
    let mut x: Vec<T> = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let (m, s) = (spec.mean[c], spec.std[c]);
        x.extend(image.data[c * plane..(c + 1) * plane].iter().map(|&v| T::lit((v as f64 - m) / s)));
    }
    let (mut c, mut h, mut w) = (3, image.height, image.width);
    let mut maps = Vec::new();
    for i in 0..=spec.deepest_used() {
        let weight = &params.get(&format!("backbone.stage{i}.weight"))?.tensor;
        let bias = &params.get(&format!("backbone.stage{i}.bias"))?.tensor;
        let (k, stride) = spec.stage_geometry(i);
        let pad = spec.stage_pad(i);
        let out_c = spec.stage_channels[i];
        if weight.shape != [out_c, c, k, k] {
            return Err(Error::shape("backbone_forward", format!("stage {i} weight {:?}, expected {:?}", weight.shape, [out_c, c, k, k])));
        }
        let out_h = conv_out_dim(h, k, stride, pad).ok_or_else(|| Error::shape("backbone_forward", "stage extent"))?;
        let out_w = conv_out_dim(w, k, stride, pad).ok_or_else(|| Error::shape("backbone_forward", "stage extent"))?;
        let g = ConvGeom { channels: c, height: h, width: w, kernel: k, stride, pad, out_h, out_w };
        let mut y = conv2d_forward(&x, &weight.data, Some(&bias.data), out_c, &g);
        y.iter_mut().for_each(|v| *v = v.max(T::zero()));
        maps.push(Tensor::new(vec![out_c, out_h, out_w], y.clone())?);
        (c, h, w, x) = (out_c, out_h, out_w, y);
    }
    Ok(maps)
}

/// Resizes every selected stage to `grid×grid` and concatenates in stage order.
pub fn embed<T: Real>(spec: &BackboneSpec, params: &ParamStore<T>, image: &Image, grid: usize, origin: Origin) -> Result<FeatureStack<T>> {
    let maps = backbone_forward(spec, params, image)?;
    let mut data = Vec::with_capacity(spec.channels() * grid * grid);
    for &i in &spec.selected {
        let m = &maps[i];
        let (c, h, w) = (m.shape[0], m.shape[1], m.shape[2]);
        if h == grid && w == grid {
            data.extend_from_slice(&m.data);
        } else {
            data.extend(bilinear_forward(&m.data, c, h, w, grid, grid));
        }
    }
    Ok(FeatureStack { channels: spec.channels(), height: grid, width: grid, data, origin })
}

/// Embeds the clean and the augmented image with the same frozen weights.
pub fn dual_embed<T: Real>(
    spec: &BackboneSpec,
    params: &ParamStore<T>,
    clean: &Image,
    augmented: &Image,
    grid: usize,
) -> Result<(FeatureStack<T>, FeatureStack<T>)> {
    if (clean.height, clean.width) != (augmented.height, augmented.width) {
        return Err(Error::shape("dual_embed", "clean and augmented images differ in size"));
    }
    Ok((embed(spec, params, clean, grid, Origin::Phi)?, embed(spec, params, augmented, grid, Origin::FInput)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_channel_sums() {
        assert_eq!(BackboneSpec::tinytex(0).channels(), 112);
        assert_eq!(BackboneSpec::resnet50_like(0).channels(), 1792);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = BackboneSpec::tinytex(0);
        s.stage_strides = vec![2, 3, 8];
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::tinytex(0);
        s.selected = vec![3];
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::tinytex(0);
        s.stage_channels = vec![8];
        s.stage_strides = vec![2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn indivisible_input_is_an_error() {
        let spec = BackboneSpec::tinytex(0);
        let mut store = ParamStore::<f32>::new();
        spec.init_params(&mut store).unwrap();
        assert!(backbone_forward(&spec, &store, &Image::filled(20, 20, [0.5; 3])).is_err());
    }
}
