//! Ranking metrics and per-category reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frm::AnomalyMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Image,
    Pixel,
}

/// Scores with binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub level: Level,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, level: Level) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("scored_set", format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        check_scores(&scores)?;
        Ok(ScoredSet { scores, labels, level })
    }

    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.scores, &self.labels)
    }

    pub fn average_precision(&self) -> Result<f64> {
        average_precision(&self.scores, &self.labels)
    }

    /// Appends another set of the same level.
    pub fn extend(&mut self, other: &ScoredSet) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| s.is_nan()) {
        Some(s) => Err(Error::Numerical(format!("score {s} is not comparable"))),
        None => Ok(()),
    }
}

fn counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by ascending score.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve via midranks: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_scores(scores)?;
    let (pos, neg) = counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUROC needs at least one positive"));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs at least one negative"));
    }
    let idx = order(scores);
    // Twice the rank sum keeps midranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let p = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += mid2 * p;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// `Σ (R_k − R_{k−1}) P_k` over descending distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_scores(scores)?;
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive"));
    }
    let mut idx = order(scores);
    idx.reverse();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_tp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += labels[idx[i]] as usize;
            seen += 1;
            i += 1;
        }
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / seen as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Reduction of a map to one image-level score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageScoreRule {
    #[default]
    Max,
    TopKMean(usize),
}

pub fn image_score(map: &AnomalyMap, rule: ImageScoreRule) -> f64 {
    match rule {
        ImageScoreRule::Max => map.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ImageScoreRule::TopKMean(k) => {
            let mut s = map.scores.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            let k = k.clamp(1, s.len().max(1));
            s[..k.min(s.len())].iter().sum::<f64>() / k as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub n_images: usize,
    /// Anomalous images skipped for lack of a ground-truth mask.
    pub skipped: usize,
}

/// Pools per-image maps of one category in insertion order.
#[derive(Debug, Clone)]
pub struct CategoryAccumulator {
    category: String,
    rule: ImageScoreRule,
    image: ScoredSet,
    pixel: ScoredSet,
    skipped: usize,
}

impl CategoryAccumulator {
    pub fn new(category: impl Into<String>, rule: ImageScoreRule) -> Self {
        let empty = |level| ScoredSet { scores: Vec::new(), labels: Vec::new(), level };
        CategoryAccumulator { category: category.into(), rule, image: empty(Level::Image), pixel: empty(Level::Pixel), skipped: 0 }
    }

    /// `mask` is `None` when an anomalous image lacks ground truth; such images are skipped.
    pub fn push(&mut self, map: &AnomalyMap, anomalous: bool, mask: Option<&[u8]>) -> Result<()> {
        let labels: Vec<bool> = match (anomalous, mask) {
            (_, Some(m)) => {
                if m.len() != map.scores.len() {
                    return Err(Error::shape("evaluate", format!("mask of {} pixels for a {}-pixel map", m.len(), map.scores.len())));
                }
                m.iter().map(|&v| v != 0).collect()
            }
            (false, None) => vec![false; map.scores.len()],
            (true, None) => {
                self.skipped += 1;
                return Ok(());
            }
        };
        self.image.scores.push(image_score(map, self.rule));
        self.image.labels.push(anomalous);
        self.pixel.scores.extend_from_slice(&map.scores);
        self.pixel.labels.extend(labels);
        Ok(())
    }

    pub fn finish(self) -> Result<CategoryReport> {
        if self.image.scores.is_empty() {
            return Err(Error::DataContract(format!("category {} has no scorable test images", self.category)));
        }
        Ok(CategoryReport {
            image_auroc: self.image.auroc()?,
            pixel_auroc: self.pixel.auroc()?,
            pixel_ap: self.pixel.average_precision()?,
            n_images: self.image.scores.len(),
            skipped: self.skipped,
            category: self.category,
        })
    }
}

/// Unweighted mean over categories, labelled `avg`.
pub fn average_row(reports: &[CategoryReport]) -> Option<CategoryReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&CategoryReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(CategoryReport {
        category: "avg".into(),
        image_auroc: mean(|r| r.image_auroc),
        pixel_auroc: mean(|r| r.pixel_auroc),
        pixel_ap: mean(|r| r.pixel_ap),
        n_images: reports.iter().map(|r| r.n_images).sum(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
    })
}

pub fn to_csv(reports: &[CategoryReport]) -> String {
    let mut s = String::from("category,image_auroc,pixel_auroc,pixel_ap,n_images\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", r.category, r.image_auroc, r.pixel_auroc, r.pixel_ap, r.n_images);
    }
    s
}

pub fn to_table(reports: &[CategoryReport]) -> String {
    let w = reports.iter().map(|r| r.category.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<w$}  {:>11}  {:>11}  {:>8}  {:>8}\n", "category", "image_auroc", "pixel_auroc", "pixel_ap", "n_images");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<w$}  {:>11.4}  {:>11.4}  {:>8.4}  {:>8}",
            r.category, r.image_auroc, r.pixel_auroc, r.pixel_ap, r.n_images
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_values() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert!(matches!(auroc(&[0.1], &[true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn map_scores() {
        let mut s = vec![0.1; 16];
        s[5] = 0.9;
        let m = AnomalyMap::new(4, 4, s, "x").unwrap();
        assert_eq!(image_score(&m, ImageScoreRule::Max), 0.9);
        assert!((image_score(&m, ImageScoreRule::TopKMean(2)) - 0.5).abs() < 1e-15);
        let u = AnomalyMap::new(2, 2, vec![0.5; 4], "u").unwrap();
        assert_eq!(image_score(&u, ImageScoreRule::Max), 0.5);
    }

    #[test]
    fn empty_category_is_an_error() {
        assert!(CategoryAccumulator::new("c", ImageScoreRule::Max).finish().is_err());
    }
}
