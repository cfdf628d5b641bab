use std::path::{Path, PathBuf};

use htc_nn::{Adam, Gradients, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Mode, NormUpdates};
use super::{inverse_frequency_weights, weighted_cross_entropy, ClassWeights, SegmenterArch, SegmenterModel};
use crate::attention_cyclegan::TrainSink;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::tensor_io::images_to_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fixed `(background, foreground)` weights; per-batch inverse
    /// frequency when absent.
    pub class_weights: Option<ClassWeights>,
    pub checkpoint_every: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            seed: 0,
            class_weights: None,
            checkpoint_every: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if let Some(w) = self.class_weights {
            super::check_weights(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub seg: f64,
}

/// Log line in the shared training-log layout.
#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    adv_s: Option<f64>,
    adv_t: Option<f64>,
    cyc_s: Option<f64>,
    cyc_t: Option<f64>,
    seg: f64,
    mode: Option<&'static str>,
}

pub struct SegmenterTrainer {
    pub model: SegmenterModel,
    pub cfg: SegmenterConfig,
    opt: Adam<f32>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    /// Loss of every step so far.
    pub losses: Vec<f64>,
    pub epochs: Vec<SegEpochRecord>,
    pub sink: TrainSink,
}

impl SegmenterTrainer {
    pub fn new(model: SegmenterModel, cfg: SegmenterConfig, sink: TrainSink) -> Result<Self> {
        cfg.validate()?;
        let params = (0..model.store.len()).collect();
        let opt = Adam::new(&model.store, params, cfg.learning_rate, cfg.beta1, cfg.beta2);
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        Ok(Self {
            shuffle_rng: stream(1),
            dropout_rng: stream(2),
            model,
            cfg,
            opt,
            losses: Vec::new(),
            epochs: Vec::new(),
            sink,
        })
    }

    pub fn from_arch(arch: SegmenterArch, cfg: SegmenterConfig, sink: TrainSink) -> Result<Self> {
        let model = SegmenterModel::new(arch, cfg.seed)?;
        Self::new(model, cfg, sink)
    }

    /// Builds the training-mode loss of `x` (`[N, 1, H, W]`) against `masks`
    /// on `g`. `x` may carry gradients from upstream networks.
    pub fn loss_on<'g>(&mut self, g: &'g Graph<f32>, x: Var<'g, f32>, masks: &[&Mask]) -> Result<(Var<'g, f32>, NormUpdates)> {
        let p = self.model.arch.patch_size;
        if x.shape().get(2..) != Some(&[p, p][..]) {
            return Err(Error::Shape(format!("segmenter expects {p}x{p} inputs, got {:?}", x.shape())));
        }
        let weights = self.cfg.class_weights.unwrap_or_else(|| inverse_frequency_weights(masks));
        let mut mode = Mode {
            train: true,
            rng: &mut self.dropout_rng,
        };
        let (probs, upd) = self.model.net.forward(g, &self.model.store, x, &mut mode);
        Ok((weighted_cross_entropy(probs, masks, weights)?, upd))
    }

    /// Optimizer step plus running-statistics update after a backward pass
    /// through [`SegmenterTrainer::loss_on`].
    pub fn apply(&mut self, grads: &Gradients<f32>, upd: &NormUpdates, loss: f64) {
        self.opt.step(&mut self.model.store, grads);
        DenseNet::update_running(&mut self.model.store, upd);
        self.losses.push(loss);
    }

    fn non_finite(&self, detail: String) -> Error {
        let checkpoint = self.sink.path("_diagnostics.ckpt").and_then(|p| {
            let meta = serde_json::json!({ "step": self.losses.len(), "detail": detail });
            self.model.to_checkpoint(meta).and_then(|c| c.save(&p)).ok().map(|_| p)
        });
        Error::NonFinite {
            epoch: self.model.epoch,
            step: self.losses.len(),
            detail,
            checkpoint,
        }
    }

    pub fn step(&mut self, images: &[&Image], masks: &[&Mask]) -> Result<f64> {
        for img in images {
            self.model.check(img)?;
        }
        let g = Graph::new();
        let x = g.constant(images_to_tensor::<f32>(images)?);
        let (loss, upd) = self.loss_on(&g, x, masks)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(self.non_finite(format!("segmentation loss {v}")));
        }
        let grads = g.backward(loss);
        self.apply(&grads, &upd, v);
        Ok(v)
    }

    pub fn run_epoch(&mut self, images: &[Image], masks: &[Mask]) -> Result<SegEpochRecord> {
        if images.is_empty() {
            return Err(Error::Argument("segmenter training needs a nonempty dataset".into()));
        }
        if images.len() != masks.len() {
            return Err(Error::Argument(format!("{} images vs {} masks", images.len(), masks.len())));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let x: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let m: Vec<&Mask> = chunk.iter().map(|&i| &masks[i]).collect();
            sum += self.step(&x, &m)?;
            n += 1;
        }
        let rec = SegEpochRecord {
            epoch: self.model.epoch,
            seg: sum / n as f64,
        };
        self.model.epoch += 1;
        self.log(&rec)?;
        if self.cfg.checkpoint_every > 0 && self.model.epoch % self.cfg.checkpoint_every == 0 {
            self.save_checkpoint()?;
        }
        Ok(rec)
    }

    /// Records an epoch summary produced outside [`SegmenterTrainer::run_epoch`].
    pub fn log(&mut self, rec: &SegEpochRecord) -> Result<()> {
        self.sink.append_log(&LogLine {
            epoch: rec.epoch,
            adv_s: None,
            adv_t: None,
            cyc_s: None,
            cyc_t: None,
            seg: rec.seg,
            mode: None,
        })?;
        self.epochs.push(rec.clone());
        Ok(())
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(p) = self.sink.checkpoint_path() else { return Ok(None) };
        let meta = serde_json::json!({ "training": self.cfg });
        self.model.to_checkpoint(meta)?.save(&p)?;
        Ok(Some(p))
    }

    pub fn train(&mut self, images: &[Image], masks: &[Mask]) -> Result<()> {
        self.sink.reset_log()?;
        while self.model.epoch < self.cfg.epochs {
            let rec = self.run_epoch(images, masks)?;
            eprintln!("[segmenter] epoch {}: loss {:.4}", rec.epoch, rec.seg);
        }
        self.save_checkpoint()?;
        Ok(())
    }
}

/// Trains a fresh segmenter on `(image, mask)` pairs; artefacts go to
/// `out_dir` when given.
pub fn train_segmenter(
    images: &[Image],
    masks: &[Mask],
    arch: SegmenterArch,
    cfg: SegmenterConfig,
    out_dir: Option<&Path>,
) -> Result<(SegmenterModel, Vec<SegEpochRecord>)> {
    if images.is_empty() {
        return Err(Error::Argument("segmenter training needs a nonempty dataset".into()));
    }
    let sink = out_dir.map(|d| TrainSink::new(d, "segmenter")).unwrap_or_default();
    let mut trainer = SegmenterTrainer::from_arch(arch, cfg, sink)?;
    trainer.train(images, masks)?;
    Ok((trainer.model, trainer.epochs))
}
