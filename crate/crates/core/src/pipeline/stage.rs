use std::path::{Path, PathBuf};

use htc_nn::{Gradients, Graph, Var};

use super::config::{StageConfig, Strategy};
use crate::attention_cyclegan::{
    EpochRecord, JointObjective, StepRecord, SynthesisModel, SynthesisTrainer, TrainSink,
};
use crate::checkpoint::Checkpoint;
use crate::data_io::{write_raw_dataset, LabeledSlice, RawDataset};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, Mask};
use crate::htc_target::{build_htc_dataset, stage_labels};
use crate::metrics::{evaluate_stage, MetricsConfig, MetricsReport, StageInputs};
use crate::segmentation::{NormUpdates, SegEpochRecord, SegmentationResult, SegmenterModel, SegmenterTrainer};

/// Synthesis and segmentation models of one trained stage.
#[derive(Debug, Clone)]
pub struct StageModels {
    pub foreground: Vec<u8>,
    pub synthesis: SynthesisModel,
    pub segmenter: SegmenterModel,
}

/// One translated and segmented patch.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrediction {
    pub result: SegmentationResult,
    pub synthetic: Option<Image>,
    pub attention: Option<Image>,
}

impl StageModels {
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<StagePrediction>> {
        let translated = self.synthesis.synthesize_batch(images, false)?;
        let syn: Vec<&Image> = translated.iter().map(|(s, _)| s).collect();
        let results = self.segmenter.segment_batch(&syn)?;
        Ok(translated
            .into_iter()
            .zip(results)
            .map(|((s, a), result)| StagePrediction {
                result,
                synthetic: Some(s),
                attention: Some(a),
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: usize,
    /// Set when there was nothing to train on.
    pub skipped: bool,
    pub models: Option<StageModels>,
    pub synthesis_epochs: Vec<EpochRecord>,
    pub synthesis_steps: Vec<StepRecord>,
    pub segmenter_epochs: Vec<SegEpochRecord>,
    /// Validation metrics on ground-truth crops.
    pub report: Option<MetricsReport>,
    pub checkpoints: Vec<PathBuf>,
}

impl StageResult {
    fn skipped(stage: usize) -> Self {
        Self {
            stage,
            skipped: true,
            models: None,
            synthesis_epochs: Vec::new(),
            synthesis_steps: Vec::new(),
            segmenter_epochs: Vec::new(),
            report: None,
            checkpoints: Vec::new(),
        }
    }
}

/// Segmentation loss on the translated batch, for joint training.
struct JointSegmentation<'a> {
    trainer: &'a mut SegmenterTrainer,
    masks: &'a [Mask],
    lambda: f64,
    alternating: bool,
    pending: Option<(NormUpdates, f64)>,
    epoch_losses: Vec<f64>,
}

impl JointObjective for JointSegmentation<'_> {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn alternating(&self) -> bool {
        self.alternating
    }

    fn loss<'g>(&mut self, g: &'g Graph<f32>, translated: Var<'g, f32>, batch: &[usize]) -> Result<Var<'g, f32>> {
        let masks: Vec<&Mask> = batch.iter().map(|&i| &self.masks[i]).collect();
        let (loss, upd) = self.trainer.loss_on(g, translated, &masks)?;
        self.pending = Some((upd, loss.item() as f64));
        Ok(loss)
    }

    fn update(&mut self, grads: &Gradients<f32>) {
        if let Some((upd, loss)) = self.pending.take() {
            self.trainer.apply(grads, &upd, loss);
            self.epoch_losses.push(loss);
        }
    }
}

fn check_patch(stage: &StageConfig, slices: &[LabeledSlice], what: &str) -> Result<()> {
    let p = stage.patch_size;
    match slices.iter().find(|s| s.dims() != (p, p)) {
        Some(s) => Err(Error::Shape(format!(
            "stage {} {what} slice is {:?}, expected {p}x{p} crops",
            stage.stage,
            s.dims()
        ))),
        None => Ok(()),
    }
}

/// Stage recipe written next to a stage's checkpoints.
pub const STAGE_FILE: &str = "stage.json";

/// Reads a trained stage directory: its recipe and both checkpoints.
pub fn load_stage(dir: &Path) -> Result<(StageConfig, StageModels)> {
    let path = dir.join(STAGE_FILE);
    let text = std::fs::read(&path).map_err(Error::io(&path))?;
    let stage: StageConfig = serde_json::from_slice(&text)?;
    let synthesis = SynthesisModel::from_checkpoint(&Checkpoint::load(&dir.join("synthesis.ckpt"))?)?;
    let mut segmenter = SegmenterModel::from_checkpoint(&Checkpoint::load(&dir.join("segmenter.ckpt"))?)?;
    segmenter.bbox_margin = stage.training.bbox_margin;
    let models = StageModels {
        foreground: stage.foreground.clone(),
        synthesis,
        segmenter,
    };
    Ok((stage, models))
}

/// Binary stage labels and their HTC targets.
fn stage_targets(stage: &StageConfig, slices: &[LabeledSlice], seed: u64) -> Result<(Vec<LabelMap>, Vec<Image>)> {
    let labels: Vec<LabelMap> = slices.iter().map(|s| stage_labels(&s.labels, &stage.foreground)).collect();
    let targets = build_htc_dataset(&labels, &stage.target, seed)?;
    Ok((labels, targets))
}

/// Trains one cascade stage on ground-truth crops and evaluates it on `val`
/// crops. Artefacts go to `out_dir` when given: `synthesis.ckpt`,
/// `segmenter.ckpt`, both JSONL logs, `report.json`, `report.csv` and the
/// montage panels under `samples/`.
pub fn run_stage(
    stage: &StageConfig,
    train: &[LabeledSlice],
    val: &[LabeledSlice],
    out_dir: Option<&Path>,
) -> Result<StageResult> {
    stage.validate()?;
    if train.is_empty() {
        return Ok(StageResult::skipped(stage.stage));
    }
    check_patch(stage, train, "training")?;
    check_patch(stage, val, "validation")?;

    let (train_labels, targets) = stage_targets(stage, train, stage.seed)?;
    let sources: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Mask> = train_labels.iter().map(|l| l.at_least(1)).collect();

    let synth_sink = out_dir.map(|d| TrainSink::new(d, "synthesis")).unwrap_or_default();
    let seg_sink = out_dir.map(|d| TrainSink::new(d, "segmenter")).unwrap_or_default();
    let mut synth = SynthesisTrainer::from_arch(stage.synthesis_arch(), stage.synthesis_config(), synth_sink)?;
    let seg_cfg = stage.segmenter_config();
    let seg_epochs = seg_cfg.epochs;
    let mut seg = SegmenterTrainer::from_arch(stage.segmenter_arch(), seg_cfg, seg_sink)?;
    seg.model.bbox_margin = stage.training.bbox_margin;
    synth.sink.reset_log()?;
    seg.sink.reset_log()?;
    if let Some(dir) = out_dir {
        let mut json = serde_json::to_vec_pretty(stage)?;
        json.push(b'\n');
        crate::checkpoint::atomic_write(&dir.join(STAGE_FILE), &json)?;
    }
    let max_steps = stage.training.max_steps;
    let mut checkpoints = Vec::new();

    match stage.strategy {
        Strategy::TwoStage => {
            while synth.model.epoch < stage.epochs {
                let rec = synth.run_epoch(&sources, &targets, None, max_steps)?;
                log_synthesis(stage.stage, &rec);
            }
            checkpoints.extend(synth.save_checkpoint()?);
            // frozen synthesis: the segmenter only ever sees its outputs
            let translated = translate_all(&synth.model, &sources)?;
            while seg.model.epoch < seg_epochs {
                let rec = seg.run_epoch(&translated, &masks)?;
                eprintln!("[stage {}] segmenter epoch {}: loss {:.4}", stage.stage, rec.epoch, rec.seg);
            }
        }
        Strategy::EndToEnd => {
            let mut joint = JointSegmentation {
                trainer: &mut seg,
                masks: &masks,
                lambda: stage.weights.lambda5,
                alternating: stage.training.alternating,
                pending: None,
                epoch_losses: Vec::new(),
            };
            while synth.model.epoch < stage.epochs {
                let rec = synth.run_epoch(&sources, &targets, Some(&mut joint), max_steps)?;
                log_synthesis(stage.stage, &rec);
                let losses = std::mem::take(&mut joint.epoch_losses);
                let seg_rec = SegEpochRecord {
                    epoch: joint.trainer.model.epoch,
                    seg: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
                };
                joint.trainer.model.epoch += 1;
                joint.trainer.log(&seg_rec)?;
            }
            checkpoints.extend(synth.save_checkpoint()?);
            if seg.model.epoch < seg_epochs {
                let translated = translate_all(&synth.model, &sources)?;
                while seg.model.epoch < seg_epochs {
                    let rec = seg.run_epoch(&translated, &masks)?;
                    eprintln!("[stage {}] segmenter epoch {}: loss {:.4}", stage.stage, rec.epoch, rec.seg);
                }
            }
        }
    }
    checkpoints.extend(seg.save_checkpoint()?);

    let models = StageModels {
        foreground: stage.foreground.clone(),
        synthesis: synth.model,
        segmenter: seg.model,
    };
    let report = if val.is_empty() {
        None
    } else {
        Some(validate_stage(stage, &models, val, out_dir)?)
    };
    Ok(StageResult {
        stage: stage.stage,
        skipped: false,
        models: Some(models),
        synthesis_epochs: synth.epochs,
        synthesis_steps: synth.steps,
        segmenter_epochs: seg.epochs,
        report,
        checkpoints,
    })
}

fn log_synthesis(stage: usize, rec: &EpochRecord) {
    eprintln!(
        "[stage {stage}] synthesis epoch {} ({:?}): adv_s {:.4} adv_t {:.4} cyc_s {:.4} cyc_t {:.4}{}",
        rec.epoch,
        rec.mode,
        rec.adv_s,
        rec.adv_t,
        rec.cyc_s,
        rec.cyc_t,
        rec.seg.map(|s| format!(" seg {s:.4}")).unwrap_or_default()
    );
}

/// Translates images in inference batches.
pub fn translate_all(model: &SynthesisModel, images: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let refs: Vec<&Image> = chunk.iter().collect();
        out.extend(model.synthesize_batch(&refs, false)?.into_iter().map(|(s, _)| s));
    }
    Ok(out)
}

fn validate_stage(
    stage: &StageConfig,
    models: &StageModels,
    val: &[LabeledSlice],
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let (labels, targets) = stage_targets(stage, val, stage.seed.wrapping_add(1))?;
    let mut preds = Vec::with_capacity(val.len());
    for chunk in val.chunks(16) {
        let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(models.predict_batch(&refs)?);
    }
    let pred_maps: Vec<LabelMap> = preds.iter().map(|p| p.result.mask.map(|&m| m as u8)).collect();
    let synthetic: Vec<Image> = preds.iter().filter_map(|p| p.synthetic.clone()).collect();
    let spacing = val[0].spacing;
    let cfg = MetricsConfig {
        spacing: [spacing[0] as f64, spacing[1] as f64],
        ..MetricsConfig::default()
    };
    let report = evaluate_stage(
        &StageInputs {
            predictions: &pred_maps,
            ground_truth: &labels,
            synthetic: Some(&synthetic),
            target: Some(&targets),
            labels: Some(&labels),
        },
        &cfg,
        serde_json::to_value(stage)?,
    )?;
    if let Some(dir) = out_dir {
        report.save(&dir.join("report.json"))?;
        let n = stage.training.samples.min(val.len());
        let attention: Vec<Image> = preds[..n].iter().filter_map(|p| p.attention.clone()).collect();
        let sources: Vec<Image> = val[..n].iter().map(|s| s.image.clone()).collect();
        write_samples(&dir.join("samples"), &sources, &attention, &synthetic[..n], &targets[..n], &labels[..n], spacing)?;
    }
    Ok(report)
}

/// Panel names of a samples directory, in montage order.
pub const SAMPLE_PANELS: [&str; 4] = ["source", "attention", "synthetic", "target"];

/// Writes montage panels as four raw datasets sharing `labels`.
pub fn write_samples(
    dir: &Path,
    source: &[Image],
    attention: &[Image],
    synthetic: &[Image],
    target: &[Image],
    labels: &[LabelMap],
    spacing: [f32; 2],
) -> Result<()> {
    for (name, images) in SAMPLE_PANELS.iter().zip([source, attention, synthetic, target]) {
        let slices = images
            .iter()
            .zip(labels)
            .map(|(img, lab)| LabeledSlice::new(img.clone(), lab.clone(), spacing, crate::data_io::Modality::Htc))
            .collect::<Result<Vec<_>>>()?;
        let ds = RawDataset::from_slices(&slices, None, serde_json::json!({ "panel": name }), None)?;
        write_raw_dataset(&dir.join(name), &ds)?;
    }
    Ok(())
}
