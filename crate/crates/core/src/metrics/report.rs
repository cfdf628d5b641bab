use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{dice, hd95, ks_statistic, psnr, ssim, SsimParams};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub psnr_peak: f64,
    pub ssim: SsimParams,
    /// Row and column pixel spacing in mm, used by HD95.
    pub spacing: [f64; 2],
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            psnr_peak: 1.0,
            ssim: SsimParams::default(),
            spacing: [1.0, 1.0],
        }
    }
}

/// One row of the report. Which fields are present depends on the entry:
/// `region_k` rows carry Dice/HD95, `class_c` rows carry K-S, the `image`
/// row carries PSNR/SSIM. `mean`/`std`/`n` summarise the entry's headline
/// per-case metric (Dice, per-image K-S, SSIM respectively).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ks_per_image: Option<f64>,
    #[serde(
        skip_serializing_if = "Option::is_none",
        default,
        serialize_with = "ser_psnr",
        deserialize_with = "de_psnr"
    )]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hd95: Option<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// JSON has no infinity; identical images are written as the string "inf".
fn ser_psnr<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    Ok(match Option::<Raw>::deserialize(d)? {
        None => None,
        Some(Raw::Num(x)) => Some(x),
        Some(Raw::Text(t)) if t == "inf" => Some(f64::INFINITY),
        Some(Raw::Text(t)) => return Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
    })
}

/// Per-case values behind a report, kept for CSV export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseRow {
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
    pub ks: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: BTreeMap<String, RegionMetrics>,
    pub config: serde_json::Value,
    pub timestamp: String,
    #[serde(skip)]
    pub cases: BTreeMap<String, Vec<CaseRow>>,
}

impl MetricsReport {
    /// One line per (case, entry) pair.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("case,region,dice,hd95,ks,psnr,ssim\n");
        for (name, rows) in &self.cases {
            for (i, r) in rows.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{i},{name},{},{},{},{},{}",
                    cell(r.dice),
                    cell(r.hd95),
                    cell(r.ks),
                    cell(r.psnr),
                    cell(r.ssim)
                );
            }
        }
        out
    }

    /// Writes the JSON report to `path` and the CSV export next to it.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::checkpoint::atomic_write(path, &json)?;
        crate::checkpoint::atomic_write(&path.with_extension("csv"), self.to_csv().as_bytes())
    }
}

/// Aligned per-case inputs. Synthetic and target images are optional as a
/// pair; `labels` assigns classes to their pixels for the K-S rows.
#[derive(Debug, Clone, Copy)]
pub struct StageInputs<'a> {
    pub predictions: &'a [LabelMap],
    pub ground_truth: &'a [LabelMap],
    pub synthetic: Option<&'a [Image]>,
    pub target: Option<&'a [Image]>,
    pub labels: Option<&'a [LabelMap]>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set so reruns can be
/// byte-identical.
pub fn report_timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|secs| std::time::UNIX_EPOCH + std::time::Duration::from_secs(secs))
        .unwrap_or_else(std::time::SystemTime::now);
    humantime::format_rfc3339_seconds(now).to_string()
}

pub fn evaluate_stage(inputs: &StageInputs, cfg: &MetricsConfig, config_echo: serde_json::Value) -> Result<MetricsReport> {
    let n = inputs.predictions.len();
    if inputs.ground_truth.len() != n {
        return Err(Error::Argument(format!(
            "{n} predictions vs {} ground truths",
            inputs.ground_truth.len()
        )));
    }
    let mut regions = BTreeMap::new();
    let mut cases: BTreeMap<String, Vec<CaseRow>> = BTreeMap::new();

    let top = inputs
        .predictions
        .iter()
        .chain(inputs.ground_truth)
        .map(LabelMap::max_label)
        .max()
        .unwrap_or(0);
    for k in 1..=top {
        let mut rows = Vec::with_capacity(n);
        for (p, g) in inputs.predictions.iter().zip(inputs.ground_truth) {
            let (pm, gm) = (p.at_least(k), g.at_least(k));
            rows.push(CaseRow {
                dice: Some(dice(&pm, &gm)?),
                hd95: hd95(&pm, &gm, cfg.spacing)?,
                ..CaseRow::default()
            });
        }
        let dices: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
        let (mean, std) = mean_std(&dices);
        regions.insert(
            format!("region_{k}"),
            RegionMetrics {
                dice: Some(mean),
                hd95: mean_of(rows.iter().filter_map(|r| r.hd95)),
                mean,
                std,
                n: dices.len(),
                ..RegionMetrics::default()
            },
        );
        cases.insert(format!("region_{k}"), rows);
    }

    match (inputs.synthetic, inputs.target) {
        (Some(syn), Some(tgt)) => {
            if syn.len() != tgt.len() {
                return Err(Error::Argument(format!("{} synthetic vs {} target images", syn.len(), tgt.len())));
            }
            let mut rows = Vec::with_capacity(syn.len());
            for (s, t) in syn.iter().zip(tgt) {
                rows.push(CaseRow {
                    psnr: Some(psnr(s, t, cfg.psnr_peak)?),
                    ssim: Some(ssim(s, t, &cfg.ssim)?),
                    ..CaseRow::default()
                });
            }
            let ssims: Vec<f64> = rows.iter().filter_map(|r| r.ssim).collect();
            let (mean, std) = mean_std(&ssims);
            regions.insert(
                "image".into(),
                RegionMetrics {
                    psnr: mean_of(rows.iter().filter_map(|r| r.psnr)),
                    ssim: Some(mean),
                    mean,
                    std,
                    n: rows.len(),
                    ..RegionMetrics::default()
                },
            );
            cases.insert("image".into(), rows);

            if let Some(labels) = inputs.labels {
                if labels.len() != syn.len() {
                    return Err(Error::Argument(format!("{} label maps vs {} images", labels.len(), syn.len())));
                }
                let classes = labels.iter().map(LabelMap::max_label).max().unwrap_or(0);
                for c in 0..=classes {
                    let (mut pooled_s, mut pooled_t, mut rows) = (Vec::new(), Vec::new(), Vec::new());
                    for ((s, t), l) in syn.iter().zip(tgt).zip(labels) {
                        crate::error::shape_check("labels vs image", l.dims(), s.dims())?;
                        let pick = |img: &Image| -> Vec<f64> {
                            img.data()
                                .iter()
                                .zip(l.data())
                                .filter(|(_, &lab)| lab == c)
                                .map(|(&v, _)| v as f64)
                                .collect()
                        };
                        let (ps, pt) = (pick(s), pick(t));
                        let ks = if ps.is_empty() { None } else { Some(ks_statistic(&ps, &pt)?) };
                        rows.push(CaseRow { ks, ..CaseRow::default() });
                        pooled_s.extend(ps);
                        pooled_t.extend(pt);
                    }
                    if pooled_s.is_empty() {
                        continue;
                    }
                    let per: Vec<f64> = rows.iter().filter_map(|r| r.ks).collect();
                    let (mean, std) = mean_std(&per);
                    regions.insert(
                        format!("class_{c}"),
                        RegionMetrics {
                            ks: Some(ks_statistic(&pooled_s, &pooled_t)?),
                            ks_per_image: Some(mean),
                            mean,
                            std,
                            n: per.len(),
                            ..RegionMetrics::default()
                        },
                    );
                    cases.insert(format!("class_{c}"), rows);
                }
            }
        }
        (None, None) => {}
        _ => return Err(Error::Argument("synthetic and target images must be given together".into())),
    }

    let mut config = serde_json::json!({ "metrics": cfg });
    if !config_echo.is_null() {
        config["run"] = config_echo;
    }
    Ok(MetricsReport {
        regions,
        config,
        timestamp: report_timestamp(),
        cases,
    })
}
