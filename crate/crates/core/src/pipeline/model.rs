use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{self, FeatureStack, Origin, WeightsSource};
use crate::error::{Error, Result};
use crate::frm::{self, AnomalyMap};
use crate::mfrm;
use crate::numeric::kernels::bilinear_forward;
use crate::numeric::{Binding, DType, Graph, ParamStore, Real, Var};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::raster::Image;

const BACKBONE_PREFIX: &str = "backbone.";

/// Header stored as the checkpoint's config blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    stage_channels: Vec<usize>,
    dtype: DType,
}

/// A configured network with all of its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
}

fn init_store<T: Real>(config: &RunConfig, import_backbone: bool) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    match (&config.backbone.weights_source, import_backbone) {
        (WeightsSource::Checkpoint { path }, true) => import_backbone_weights(config, Path::new(path), &mut store)?,
        (WeightsSource::Checkpoint { .. }, false) => {
            let mut spec = config.backbone.clone();
            spec.weights_source = WeightsSource::BuiltinRandom { seed: 0 };
            spec.init_params(&mut store)?;
        }
        (WeightsSource::BuiltinRandom { .. }, _) => config.backbone.init_params(&mut store)?,
    }
    let (c, grid, image) = (config.backbone.channels(), config.grid_size, config.image_size);
    mfrm::init_params(&config.mfrm, c, grid, &mut store, config.seed)?;
    if config.frm_enabled {
        frm::init_params(&config.frm, grid, image, &mut store, config.seed)?;
    }
    Ok(store)
}

fn import_backbone_weights<T: Real>(config: &RunConfig, path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let mut expected = ParamStore::<f32>::new();
    let mut spec = config.backbone.clone();
    spec.weights_source = WeightsSource::BuiltinRandom { seed: 0 };
    spec.init_params(&mut expected)?;
    for (name, e) in expected.iter() {
        let found = ckpt.entries.iter().find(|x| &x.name == name).ok_or_else(|| Error::IncompatibleCheckpoint {
            expected: format!("{name} {:?}", e.tensor.shape),
            found: format!("no such entry in {}", path.display()),
        })?;
        if found.shape != e.tensor.shape {
            return Err(Error::IncompatibleCheckpoint { expected: format!("{name} {:?}", e.tensor.shape), found: format!("{name} {:?}", found.shape) });
        }
        store.insert(name.clone(), crate::numeric::Tensor::new(found.shape.clone(), found.data.to_real())?, true)?;
    }
    Ok(())
}

fn shape_summary(c: &RunConfig) -> String {
    format!(
        "image {} grid {} backbone {} C={} D={} L={} patch {} C1={} N={} arch {:?} frm {}",
        c.image_size,
        c.grid_size,
        c.backbone.name,
        c.backbone.channels(),
        c.mfrm.embed_dim,
        c.mfrm.depth,
        c.mfrm.patch_size,
        c.mfrm.reduced_channels,
        c.mfrm.state_dim,
        c.mfrm.arch,
        if c.frm_enabled { format!("{}x{}", c.frm.depth, c.frm.base_channels) } else { "off".into() }
    )
}

impl<T: Real> Model<T> {
    /// Freshly initialized parameters; backbone weights are frozen.
    pub fn new(config: RunConfig) -> Result<Self> {
        let params = init_store(&config, true)?;
        Ok(Model { config, params })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = Header { config: self.config.clone(), stage_channels: self.config.backbone.stage_channels.clone(), dtype: T::DTYPE };
        Ok(Checkpoint::from_store(serde_json::to_string(&header)?, &self.params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Loads a checkpoint; when `expected` is given its shape-relevant settings must match.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&RunConfig>) -> Result<Self> {
        let header: Header = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Checkpoint { offset: 16, reason: format!("config blob: {e}") })?;
        let config = header.config;
        if let Some(want) = expected {
            if shape_summary(want) != shape_summary(&config) {
                return Err(Error::IncompatibleCheckpoint { expected: shape_summary(want), found: shape_summary(&config) });
            }
        }
        let reference: ParamStore<f32> = init_store(&config, false)?;
        let want: BTreeMap<&str, &[usize]> = reference.iter().map(|(n, e)| (n.as_str(), e.tensor.shape.as_slice())).collect();
        let got: BTreeMap<&str, &[usize]> = ckpt.entries.iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
        if want != got {
            let missing: Vec<_> = want.iter().filter(|(k, v)| got.get(*k) != Some(*v)).map(|(k, v)| format!("{k} {v:?}")).take(3).collect();
            let extra: Vec<_> = got.iter().filter(|(k, v)| want.get(*k) != Some(*v)).map(|(k, v)| format!("{k} {v:?}")).take(3).collect();
            return Err(Error::IncompatibleCheckpoint { expected: missing.join(", "), found: extra.join(", ") });
        }
        let params = ckpt.to_store(&[BACKBONE_PREFIX])?;
        Ok(Model { config, params })
    }

    pub fn load(path: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }

    /// Checksum over the frozen backbone entries.
    pub fn backbone_checksum(&self) -> u64 {
        self.params.checksum(|n, _| n.starts_with(BACKBONE_PREFIX))
    }

    pub fn embed(&self, image: &Image, origin: Origin) -> Result<FeatureStack<T>> {
        let c = &self.config;
        if image.height != c.image_size || image.width != c.image_size {
            return Err(Error::shape("embed", format!("image {}×{} but model expects {}²", image.height, image.width, c.image_size)));
        }
        embed::embed(&c.backbone, &self.params, image, c.grid_size, origin)
    }

    /// Reconstruction on a bound graph.
    pub fn reconstruct<'g>(&self, b: &Binding<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        mfrm::mfrm_forward(&self.config.mfrm, b, f)
    }

    /// Refinement map (probabilities) from the input stack and its reconstruction.
    pub fn refine<'g>(&self, b: &Binding<'g, T>, f: Var<'g, T>, f_hat: Var<'g, T>) -> Result<Var<'g, T>> {
        frm::refine(&self.config.frm, b, f.channel_mean()?, f_hat.channel_mean()?, self.config.image_size)
    }

    pub fn reconstruct_stack(&self, f: &FeatureStack<T>) -> Result<FeatureStack<T>> {
        let g = Graph::new();
        let b = self.params.bind(&g);
        let fv = g.constant(&f.shape(), f.data.clone())?;
        let out = self.reconstruct(&b, fv)?;
        Ok(FeatureStack { channels: f.channels, height: f.height, width: f.width, data: out.value().to_vec(), origin: Origin::FHat })
    }

    /// Scores an image. With refinement disabled the map is `d/(1+d)` of the
    /// per-position distance `‖F − F̂‖₂`, bilinearly upsampled.
    pub fn anomaly_map(&self, image: &Image, id: &str) -> Result<AnomalyMap> {
        let f = self.embed(image, Origin::FInput)?;
        let size = self.config.image_size;
        let g = Graph::new();
        let b = self.params.bind(&g);
        let fv = g.constant(&f.shape(), f.data.clone())?;
        let f_hat = self.reconstruct(&b, fv)?;
        let scores: Vec<f64> = if self.config.frm_enabled {
            self.refine(&b, fv, f_hat)?.value().iter().map(|v| v.as_f64()).collect()
        } else {
            let plane = f.height * f.width;
            let rec = f_hat.value();
            let dist: Vec<f64> = (0..plane)
                .map(|i| (0..f.channels).map(|c| (f.data[c * plane + i] - rec[c * plane + i]).as_f64().powi(2)).sum::<f64>().sqrt())
                .collect();
            bilinear_forward(&dist, 1, f.height, f.width, size, size).into_iter().map(|d| d / (1.0 + d)).collect()
        };
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite anomaly score for {id}")));
        }
        AnomalyMap::new(size, size, scores, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.image_size = 32;
        c.grid_size = 16;
        c.mfrm.embed_dim = 8;
        c.mfrm.reduced_channels = 8;
        c.mfrm.depth = 1;
        c.frm.base_channels = 2;
        c.frm.depth = 2;
        c
    }

    #[test]
    fn checkpoint_round_trip_reproduces_maps() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let ck = m.checkpoint().unwrap();
        let back = Model::<f64>::from_checkpoint(&Checkpoint::decode(&ck.encode().unwrap()).unwrap(), None).unwrap();
        let img = Image::filled(32, 32, [0.3, 0.6, 0.1]);
        assert_eq!(m.anomaly_map(&img, "a").unwrap(), back.anomaly_map(&img, "a").unwrap());
        let mut other = tiny();
        other.mfrm.embed_dim = 16;
        other.mfrm.reduced_channels = 16;
        assert!(matches!(Model::<f64>::from_checkpoint(&ck, Some(&other)), Err(Error::IncompatibleCheckpoint { .. })));
    }

    #[test]
    fn no_refinement_map_in_unit_range() {
        let mut c = tiny();
        c.frm_enabled = false;
        let m = Model::<f32>::new(c).unwrap();
        let map = m.anomaly_map(&Image::filled(32, 32, [0.9, 0.1, 0.5]), "x").unwrap();
        assert!(map.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert!(!m.params.contains("frm.final.weight"));
    }
}
