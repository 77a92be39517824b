use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::BackboneSpec;
use crate::error::{Error, Result};
use crate::frm::FrmConfig;
use crate::metrics::ImageScoreRule;
use crate::mfrm::{MfrmConfig, ReconArch};
use crate::numeric::DType;
use crate::objectives::FocalParams;
use crate::synth::SynthConfig;

/// Everything that determines a training run and the model's shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub image_size: usize,
    pub grid_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub mfrm: MfrmConfig,
    pub frm: FrmConfig,
    pub synth: SynthConfig,
    pub frm_enabled: bool,
    pub focal: FocalParams,
    pub precision: DType,
    pub image_score: ImageScoreRule,
    pub checkpoint_every: usize,
    pub strict_deterministic: bool,
    /// Directory of texture images replacing the procedural bank.
    pub texture_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Full-size profile: 256² input, 64² grid, D = 192, L = 8, 700 epochs.
    pub fn full() -> Self {
        RunConfig {
            image_size: 256,
            grid_size: 64,
            batch_size: 4,
            epochs: 700,
            lr: 1e-4,
            seed: 0,
            backbone: BackboneSpec::resnet50_like(0),
            mfrm: MfrmConfig::default(),
            frm: FrmConfig::default(),
            synth: SynthConfig::default(),
            frm_enabled: true,
            focal: FocalParams::default(),
            precision: DType::F32,
            image_score: ImageScoreRule::Max,
            checkpoint_every: 50,
            strict_deterministic: false,
            texture_dir: None,
        }
    }

    /// CPU-sized profile used for the built-in synthetic corpus.
    pub fn desk() -> Self {
        RunConfig {
            image_size: 128,
            grid_size: 32,
            batch_size: 2,
            epochs: 60,
            lr: 1e-3,
            backbone: BackboneSpec::tinytex(0),
            mfrm: MfrmConfig { embed_dim: 64, depth: 2, reduced_channels: 64, ..MfrmConfig::default() },
            frm: FrmConfig { depth: 3, base_channels: 16 },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        self.backbone.validate()?;
        let stride = self.backbone.deepest_stride();
        if self.image_size == 0 || self.image_size % stride != 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by the backbone stride {stride} and by 4",
                self.image_size
            )));
        }
        self.mfrm.validate(self.backbone.channels(), self.grid_size)?;
        self.frm.validate(self.grid_size, self.image_size)?;
        let s = &self.synth;
        if !(s.alpha_min > 0.0 && s.alpha_min <= s.alpha_max && s.alpha_max <= 1.0) {
            return Err(Error::Config(format!("alpha range [{}, {}] must lie in (0, 1]", s.alpha_min, s.alpha_max)));
        }
        if !(-1.0 < s.threshold && s.threshold < 1.0) {
            return Err(Error::Config(format!("perlin threshold {} outside (-1, 1)", s.threshold)));
        }
        if s.resolutions.is_empty() || s.resolutions.contains(&0) {
            return Err(Error::Config("perlin resolutions must be non-empty and positive".into()));
        }
        if !(0.0 <= s.area.min && s.area.min < s.area.max && s.area.max <= 1.0) {
            return Err(Error::Config(format!("area bounds [{}, {}] invalid", s.area.min, s.area.max)));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let v = value.trim();
        match key.trim() {
            "profile" => {
                let seed = self.seed;
                *self = match v {
                    "full" => Self::full(),
                    "desk" => Self::desk(),
                    other => return Err(Error::Config(format!("unknown profile {other:?}"))),
                };
                self.seed = seed;
            }
            "image_size" => self.image_size = num(key, v)?,
            "grid_size" => self.grid_size = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "backbone" => {
                let src = self.backbone.weights_source.clone();
                self.backbone = BackboneSpec::by_name(v, 0)?;
                self.backbone.weights_source = src;
            }
            "backbone_stages" => self.backbone.selected = list(key, v)?,
            "backbone_seed" => self.backbone.weights_source = crate::embed::WeightsSource::BuiltinRandom { seed: num(key, v)? },
            "backbone_checkpoint" => self.backbone.weights_source = crate::embed::WeightsSource::Checkpoint { path: v.to_string() },
            "embed_dim" => self.mfrm.embed_dim = num(key, v)?,
            "depth" => self.mfrm.depth = num(key, v)?,
            "patch_size" => self.mfrm.patch_size = num(key, v)?,
            "reduced_channels" => self.mfrm.reduced_channels = num(key, v)?,
            "state_dim" => self.mfrm.state_dim = num(key, v)?,
            "conv_width" => self.mfrm.conv_width = num(key, v)?,
            "expand_factor" => self.mfrm.expand_factor = num(key, v)?,
            "recon_arch" => self.mfrm.arch = v.parse::<ReconArch>()?,
            "frm_enabled" => self.frm_enabled = num(key, v)?,
            "frm_depth" => self.frm.depth = num(key, v)?,
            "frm_base_channels" => self.frm.base_channels = num(key, v)?,
            "alpha_min" => self.synth.alpha_min = num(key, v)?,
            "alpha_max" => self.synth.alpha_max = num(key, v)?,
            "perlin_resolutions" => self.synth.resolutions = list(key, v)?,
            "perlin_threshold" => self.synth.threshold = num(key, v)?,
            "area_min" => self.synth.area.min = num(key, v)?,
            "area_max" => self.synth.area.max = num(key, v)?,
            "focal_alpha" => self.focal.alpha_pos = num(key, v)?,
            "focal_gamma" => self.focal.gamma = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "32" => DType::F32,
                    "f64" | "64" => DType::F64,
                    other => return Err(Error::Config(format!("precision {other:?} is not f32 or f64"))),
                }
            }
            "image_score" => {
                self.image_score = match v.split_once(':') {
                    None if v == "max" => ImageScoreRule::Max,
                    Some(("topk", k)) => ImageScoreRule::TopKMean(num(key, k)?),
                    _ => return Err(Error::Config(format!("image_score {v:?} is not max or topk:<k>"))),
                }
            }
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "strict_deterministic" => self.strict_deterministic = num(key, v)?,
            "texture_dir" => self.texture_dir = (!v.is_empty()).then(|| v.to_string()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` line is applied first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        pairs.sort_by_key(|(k, _)| k != "profile");
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::full().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert_eq!(RunConfig::full().mfrm.tokens(64), 256);
    }

    #[test]
    fn parse_applies_profile_first() {
        let cfg = RunConfig::parse("epochs = 3 # short\nprofile = full\nrecon_arch=conv3\nimage_score = topk:100\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.mfrm.arch, ReconArch::Conv3);
        assert_eq!(cfg.image_score, ImageScoreRule::TopKMean(100));
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut cfg = RunConfig::desk();
        cfg.image_size = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.grid_size = 30;
        assert!(cfg.validate().is_err());
    }
}
