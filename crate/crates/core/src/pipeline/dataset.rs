//! Directory layouts for anomaly-free training images and labelled test images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<cat>/train/good/*`, `<cat>/test/<defect>/*`, `<cat>/ground_truth/<defect>/*_mask.*`.
    Mvtec,
    /// `<cat>/train/*`, `<cat>/test/*`, `<cat>/masks/<stem>[_mask].*`; a test image is anomalous iff it has a mask.
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub path: PathBuf,
    pub mask: Option<PathBuf>,
    pub anomalous: bool,
    /// Defect folder name, `good` for anomaly-free items.
    pub defect: String,
}

impl Item {
    pub fn id(&self) -> String {
        let stem = self.path.file_stem().unwrap_or_default().to_string_lossy();
        format!("{}/{stem}", self.defect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub name: String,
    pub train: Vec<Item>,
    pub test: Vec<Item>,
}

impl Category {
    pub fn items(&self, split: Split) -> &[Item] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Problems found while listing a dataset that do not stop ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub missing_masks: Vec<PathBuf>,
    pub malformed: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub layout: Layout,
    pub categories: Vec<Category>,
    pub report: ValidationReport,
}

const IMAGE_EXTS: [&str; 6] = ["png", "ppm", "pnm", "pgm", "jpg", "bmp"];

fn is_image(p: &Path) -> bool {
    p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::DataContract(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

fn find_mask(dir: &Path, stem: &str) -> Option<PathBuf> {
    let candidates = [format!("{stem}_mask"), stem.to_string()];
    let entries = sorted_entries(dir).ok()?;
    candidates.iter().find_map(|c| entries.iter().find(|p| is_image(p) && p.file_stem().is_some_and(|s| s == c.as_str())).cloned())
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn ingest_mvtec(dir: &Path, name: &str, report: &mut ValidationReport) -> Result<Category> {
    let train_dir = dir.join("train");
    let mut train = Vec::new();
    for entry in sorted_entries(&train_dir)? {
        if entry.is_dir() {
            let sub = entry.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if sub != "good" {
                return Err(Error::DataContract(format!(
                    "training split of {name} contains non-good folder {sub:?}; training data must be anomaly-free"
                )));
            }
            train.extend(images_in(&entry)?.into_iter().map(|path| Item { path, mask: None, anomalous: false, defect: "good".into() }));
        }
    }
    let mut test = Vec::new();
    let test_dir = dir.join("test");
    if test_dir.is_dir() {
        for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
            let defect = defect_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let anomalous = defect != "good";
            for path in images_in(&defect_dir)? {
                let mask = if anomalous { find_mask(&dir.join("ground_truth").join(&defect), &stem(&path)) } else { None };
                if anomalous && mask.is_none() {
                    report.missing_masks.push(path.clone());
                }
                test.push(Item { path, mask, anomalous, defect: defect.clone() });
            }
        }
    }
    Ok(Category { name: name.to_string(), train, test })
}

fn ingest_flat(dir: &Path, name: &str) -> Result<Category> {
    let train = images_in(&dir.join("train"))?
        .into_iter()
        .map(|path| Item { path, mask: None, anomalous: false, defect: "good".into() })
        .collect();
    let mut test = Vec::new();
    if dir.join("test").is_dir() {
        for path in images_in(&dir.join("test"))? {
            let mask = find_mask(&dir.join("masks"), &stem(&path));
            let anomalous = mask.is_some();
            test.push(Item { path, mask, anomalous, defect: if anomalous { "anomaly".into() } else { "good".into() } });
        }
    }
    Ok(Category { name: name.to_string(), train, test })
}

/// Lists every category under `root` (directories containing `train/`), in name order.
pub fn ingest(root: &Path, layout: Layout) -> Result<DatasetHandle> {
    if !root.is_dir() {
        return Err(Error::DataContract(format!("dataset root {} is not a directory", root.display())));
    }
    let mut report = ValidationReport::default();
    let mut categories = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        categories.push(match layout {
            Layout::Mvtec => ingest_mvtec(&dir, &name, &mut report)?,
            Layout::Flat => ingest_flat(&dir, &name)?,
        });
    }
    if categories.is_empty() {
        return Err(Error::DataContract(format!("no categories with a train/ folder under {}", root.display())));
    }
    for p in &report.missing_masks {
        log::warn!("anomalous test image without ground truth: {}", p.display());
    }
    Ok(DatasetHandle { root: root.to_path_buf(), layout, categories, report })
}

impl DatasetHandle {
    pub fn category(&self, name: &str) -> Result<&Category> {
        self.categories.iter().find(|c| c.name == name).ok_or_else(|| {
            let known: Vec<_> = self.categories.iter().map(|c| c.name.as_str()).collect();
            Error::DataContract(format!("no category {name:?}; found {known:?}"))
        })
    }
}

/// Decodes the anomaly-free training images, skipping unreadable files with a warning.
pub fn load_train_images(cat: &Category, size: usize) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for item in &cat.train {
        match Image::load(&item.path, Some(size)) {
            Ok(img) => out.push(img),
            Err(e) => log::warn!("skipping malformed training image: {e}"),
        }
    }
    if out.is_empty() {
        return Err(Error::DataContract(format!("category {} has no readable training images", cat.name)));
    }
    Ok(out)
}

/// A decoded test item; `mask` is `None` only for anomalous items lacking ground truth.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub item: Item,
    pub image: Image,
    pub mask: Option<Mask>,
}

pub fn load_test_samples(cat: &Category, size: usize) -> Result<Vec<TestSample>> {
    let mut out = Vec::new();
    for item in &cat.test {
        let image = match Image::load(&item.path, Some(size)) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping malformed test image: {e}");
                continue;
            }
        };
        let mask = match (&item.mask, item.anomalous) {
            (Some(p), _) => Some(Mask::load(p, Some(size))?),
            (None, false) => Some(Mask::empty(size, size)),
            (None, true) => None,
        };
        out.push(TestSample { item: item.clone(), image, mask });
    }
    Ok(out)
}
