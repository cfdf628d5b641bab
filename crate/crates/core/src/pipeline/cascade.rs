use std::path::Path;

use super::config::StageConfig;
use super::stage::{run_stage, StageModels, StagePrediction, StageResult};
use crate::data_io::{crop_to_bbox, BBox, Crop, CropWindow, LabeledSlice};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, Mask};
use crate::htc_target::{build_htc_target, stage_labels};
use crate::metrics::{evaluate_stage, MetricsConfig, MetricsReport, StageInputs};
use crate::segmentation::SegmentationResult;

/// Ground-truth crops for training stage `index` (0-based): stage 1 sees the
/// whole slice, later stages the box of the previous stage's foreground.
/// Slices without that foreground contribute nothing.
pub fn training_crops(stages: &[StageConfig], index: usize, slices: &[LabeledSlice]) -> Result<Vec<Crop>> {
    let stage = &stages[index];
    let mut out = Vec::with_capacity(slices.len());
    for s in slices {
        let (rows, cols) = s.dims();
        let bbox = if index == 0 {
            Some(BBox::full(rows, cols))
        } else {
            BBox::of_mask(&s.labels.in_set(&stages[index - 1].foreground))
        };
        if let Some(b) = bbox {
            out.push(crop_to_bbox(s, &b, stage.patch_size, stage.training.bbox_margin)?);
        }
    }
    Ok(out)
}

/// Anything that turns a stage crop into a foreground mask.
pub trait StagePredictor {
    fn predict(&self, crops: &[&LabeledSlice]) -> Result<Vec<StagePrediction>>;
}

impl StagePredictor for StageModels {
    fn predict(&self, crops: &[&LabeledSlice]) -> Result<Vec<StagePrediction>> {
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(16) {
            let images: Vec<&Image> = chunk.iter().map(|c| &c.image).collect();
            out.extend(self.predict_batch(&images)?);
        }
        Ok(out)
    }
}

/// Reads the answer off the crop's own labels.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub foreground: Vec<u8>,
}

impl StagePredictor for OraclePredictor {
    fn predict(&self, crops: &[&LabeledSlice]) -> Result<Vec<StagePrediction>> {
        Ok(crops
            .iter()
            .map(|c| {
                let mask = c.labels.in_set(&self.foreground);
                StagePrediction {
                    result: SegmentationResult {
                        probability: mask.to_image(),
                        bbox: BBox::of_mask(&mask),
                        mask,
                    },
                    synthetic: None,
                    attention: None,
                }
            })
            .collect())
    }
}

/// One stage's output on one slice.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub window: CropWindow,
    /// Prediction in crop coordinates.
    pub prediction: StagePrediction,
    /// This stage's region in slice coordinates, confined to the previous
    /// stage's region.
    pub region: Mask,
}

#[derive(Debug, Clone)]
pub struct CascadeCase {
    /// `None` from the first stage whose predecessor found nothing.
    pub stages: Vec<Option<StageOutput>>,
    /// 0 outside every stage region, otherwise the innermost stage index.
    pub label_map: LabelMap,
}

#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub cases: Vec<CascadeCase>,
    /// Per-stage metrics against the ground truth of each slice.
    pub reports: Vec<MetricsReport>,
}

/// Runs the stages in order on full slices: stage `k+1` crops around the
/// box of stage `k`'s predicted region, and its mask is pasted back and
/// intersected with that region, so regions are nested by construction.
pub fn run_cascade(
    stages: &[StageConfig],
    predictors: &[&dyn StagePredictor],
    slices: &[LabeledSlice],
) -> Result<CascadeResult> {
    if stages.len() != predictors.len() {
        return Err(Error::Argument(format!(
            "{} stages vs {} predictors",
            stages.len(),
            predictors.len()
        )));
    }
    let mut regions: Vec<Option<Mask>> = slices.iter().map(|_| None).collect();
    let mut outputs: Vec<Vec<Option<StageOutput>>> = slices.iter().map(|_| Vec::new()).collect();
    for (k, (stage, predictor)) in stages.iter().zip(predictors).enumerate() {
        let mut crops = Vec::new();
        let mut owners = Vec::new();
        for (i, s) in slices.iter().enumerate() {
            let (rows, cols) = s.dims();
            let bbox = if k == 0 {
                Some(BBox::full(rows, cols))
            } else {
                regions[i].as_ref().and_then(BBox::of_mask)
            };
            if let Some(b) = bbox {
                crops.push(crop_to_bbox(s, &b, stage.patch_size, stage.training.bbox_margin)?);
                owners.push(i);
            }
        }
        let refs: Vec<&LabeledSlice> = crops.iter().map(|c| &c.slice).collect();
        let preds = if refs.is_empty() { Vec::new() } else { predictor.predict(&refs)? };
        if preds.len() != refs.len() {
            return Err(Error::Argument(format!("predictor returned {} of {} masks", preds.len(), refs.len())));
        }
        let mut next: Vec<Option<Mask>> = slices.iter().map(|_| None).collect();
        for ((crop, pred), &i) in crops.iter().zip(preds).zip(&owners) {
            let mut region = crop.window.paste_mask(&pred.result.mask);
            if let Some(prev) = &regions[i] {
                for (r, &p) in region.data_mut().iter_mut().zip(prev.data()) {
                    *r &= p;
                }
            }
            // an empty region stops the cascade for this slice
            if region.count() > 0 {
                next[i] = Some(region.clone());
            }
            outputs[i].push(Some(StageOutput {
                window: crop.window,
                prediction: pred,
                region,
            }));
        }
        for out in outputs.iter_mut().filter(|o| o.len() < k + 1) {
            out.push(None);
        }
        regions = next;
    }

    let cases: Vec<CascadeCase> = slices
        .iter()
        .zip(outputs)
        .map(|(s, stages_out)| {
            let (rows, cols) = s.dims();
            let mut label_map = LabelMap::filled(rows, cols, 0);
            for (k, out) in stages_out.iter().enumerate() {
                if let Some(o) = out {
                    for (l, &m) in label_map.data_mut().iter_mut().zip(o.region.data()) {
                        if m {
                            *l = (k + 1) as u8;
                        }
                    }
                }
            }
            CascadeCase {
                stages: stages_out,
                label_map,
            }
        })
        .collect();

    let reports = stages
        .iter()
        .enumerate()
        .map(|(k, stage)| stage_report(stage, k, slices, &cases))
        .collect::<Result<Vec<_>>>()?;
    Ok(CascadeResult { cases, reports })
}

/// Dice/HD95 of the stage region against its ground truth over every slice,
/// plus K-S/PSNR/SSIM of the synthetic crops against HTC targets built from
/// the crops' labels.
fn stage_report(stage: &StageConfig, k: usize, slices: &[LabeledSlice], cases: &[CascadeCase]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(slices.len());
    let mut truth = Vec::with_capacity(slices.len());
    let (mut syn, mut tgt, mut labs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (s, case)) in slices.iter().zip(cases).enumerate() {
        let (rows, cols) = s.dims();
        let out = case.stages.get(k).and_then(|o| o.as_ref());
        let region = out.map_or_else(|| Mask::filled(rows, cols, false), |o| o.region.clone());
        preds.push(region.map(|&m| m as u8));
        truth.push(stage_labels(&s.labels, &stage.foreground));
        if let Some(o) = out {
            if let Some(sy) = &o.prediction.synthetic {
                let local = stage_labels(&o.window.extract(&s.labels, 0), &stage.foreground);
                tgt.push(build_htc_target(&local, &stage.target, stage.seed.wrapping_add(i as u64))?);
                syn.push(sy.clone());
                labs.push(local);
            }
        }
    }
    let spacing = slices.first().map_or([1.0, 1.0], |s| [s.spacing[0] as f64, s.spacing[1] as f64]);
    let cfg = MetricsConfig {
        spacing,
        ..MetricsConfig::default()
    };
    let has_syn = !syn.is_empty();
    evaluate_stage(
        &StageInputs {
            predictions: &preds,
            ground_truth: &truth,
            synthetic: has_syn.then_some(&syn[..]),
            target: has_syn.then_some(&tgt[..]),
            labels: has_syn.then_some(&labs[..]),
        },
        &cfg,
        serde_json::to_value(stage)?,
    )
}

/// Trains every stage on ground-truth crops of `train` (validating on crops
/// of `val`), writing each stage under `out_dir/stage{k}`.
pub fn train_cascade(
    stages: &[StageConfig],
    train: &[LabeledSlice],
    val: &[LabeledSlice],
    out_dir: Option<&Path>,
) -> Result<Vec<StageResult>> {
    super::config::validate_stages(stages)?;
    let mut results = Vec::with_capacity(stages.len());
    for (k, stage) in stages.iter().enumerate() {
        let tr: Vec<LabeledSlice> = training_crops(stages, k, train)?.into_iter().map(|c| c.slice).collect();
        let va: Vec<LabeledSlice> = training_crops(stages, k, val)?.into_iter().map(|c| c.slice).collect();
        let dir = out_dir.map(|d| d.join(format!("stage{}", stage.stage)));
        results.push(run_stage(stage, &tr, &va, dir.as_deref())?);
    }
    Ok(results)
}
