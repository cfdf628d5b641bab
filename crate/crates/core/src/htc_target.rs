//! High-tissue-contrast targets: every labelled class is redrawn from its own
//! narrow intensity distribution.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::grid::{Image, LabelMap};
use crate::metrics::ks_statistic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDist {
    pub mean: f64,
    pub std: f64,
}

/// `(mean, std)` per label value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub classes: BTreeMap<u8, ClassDist>,
}

impl Default for TargetDistribution {
    fn default() -> Self {
        Self::binary(0.75, 0.05, 0.25, 0.05)
    }
}

impl TargetDistribution {
    /// Foreground is label 1, background label 0.
    pub fn binary(mu_f: f64, sigma_f: f64, mu_b: f64, sigma_b: f64) -> Self {
        let mut classes = BTreeMap::new();
        classes.insert(0, ClassDist { mean: mu_b, std: sigma_b });
        classes.insert(1, ClassDist { mean: mu_f, std: sigma_f });
        Self { classes }
    }

    pub fn get(&self, label: u8) -> Result<ClassDist> {
        self.classes.get(&label).copied().ok_or(Error::MissingClass(label))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Argument("target distribution has no classes".into()));
        }
        for (l, d) in &self.classes {
            if !(0.0..=1.0).contains(&d.mean) || !(d.std >= 0.0) || !d.std.is_finite() {
                return Err(Error::Argument(format!("class {l}: invalid target {d:?}")));
            }
        }
        let means: Vec<f64> = self.classes.values().map(|d| d.mean).collect();
        for (i, a) in means.iter().enumerate() {
            if means[i + 1..].contains(a) {
                return Err(Error::Argument(format!("two classes share target mean {a}")));
            }
        }
        Ok(())
    }
}

/// 0/1 label map of the stage foreground (union of `foreground` labels).
pub fn stage_labels(labels: &LabelMap, foreground: &[u8]) -> LabelMap {
    labels.map(|l| u8::from(foreground.contains(l)))
}

/// Draws each pixel from its class distribution, clipped to `[0, 1]`.
pub fn build_htc_target(labels: &LabelMap, dist: &TargetDistribution, seed: u64) -> Result<Image> {
    build_with_rng(labels, dist, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Dataset variant: image `i` uses stream `i` of `seed`.
pub fn build_htc_dataset(labels: &[LabelMap], dist: &TargetDistribution, seed: u64) -> Result<Vec<Image>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            build_with_rng(l, dist, &mut rng)
        })
        .collect()
}

fn build_with_rng(labels: &LabelMap, dist: &TargetDistribution, rng: &mut ChaCha8Rng) -> Result<Image> {
    let mut normals: [Option<Normal<f64>>; 256] = [None; 256];
    for &l in labels.data() {
        if normals[l as usize].is_none() {
            let d = dist.get(l)?;
            normals[l as usize] =
                Some(Normal::new(d.mean, d.std).map_err(|e| Error::Argument(format!("class {l}: {e}")))?);
        }
    }
    let data = labels
        .data()
        .iter()
        .map(|&l| normals[l as usize].expect("filled above").sample(rng).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(labels.rows(), labels.cols(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator; 0 for a single pixel).
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: BTreeMap<u8, ClassStat>,
}

pub fn class_stats(image: &Image, labels: &LabelMap) -> Result<ClassStats> {
    shape_check("class_stats", image.dims(), labels.dims())?;
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (&v, &l) in image.data().iter().zip(labels.data()) {
        groups.entry(l).or_default().push(v as f64);
    }
    let classes = groups
        .into_iter()
        .map(|(l, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let ss = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            let std = if v.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
            (l, ClassStat { mean, std, count: v.len() })
        })
        .collect();
    Ok(ClassStats { classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub a: u8,
    pub b: u8,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub pairs: Vec<PairOverlap>,
    /// Requested classes that have no pixels.
    pub missing: Vec<u8>,
}

/// Pairwise K-S between the intensities of `classes` (all present labels
/// when `None`).
pub fn class_overlap_report(image: &Image, labels: &LabelMap, classes: Option<&[u8]>) -> Result<OverlapReport> {
    shape_check("class_overlap_report", image.dims(), labels.dims())?;
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (&v, &l) in image.data().iter().zip(labels.data()) {
        groups.entry(l).or_default().push(v as f64);
    }
    let wanted: Vec<u8> = match classes {
        Some(c) => c.to_vec(),
        None => groups.keys().copied().collect(),
    };
    let (present, missing): (Vec<u8>, Vec<u8>) = wanted.iter().partition(|c| groups.contains_key(c));
    if present.len() < 2 {
        return Err(Error::Argument(format!("need two populated classes, found {present:?}")));
    }
    let mut pairs = Vec::new();
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            pairs.push(PairOverlap {
                a,
                b,
                ks: ks_statistic(&groups[&a], &groups[&b])?,
            });
        }
    }
    Ok(OverlapReport { pairs, missing })
}
