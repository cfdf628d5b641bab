use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use htc_nn::{Adam, Gradients, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    cycle_loss, discriminator_loss, generator_adversarial, synthesis_loss_var, GanObjective, LossWeights,
    SynthLossBreakdown,
};
use super::model::{cycle_forward, disc_inputs, translate_forward, DiscMode, SynthesisArch, SynthesisModel, SynthesisNets};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::tensor_io::images_to_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub weights: LossWeights,
    pub objective: GanObjective,
    pub epochs: usize,
    /// First epoch (0-based) whose discriminators see masked images.
    pub switch_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            objective: GanObjective::default(),
            epochs: 180,
            switch_epoch: 25,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub adv_s: f64,
    pub adv_t: f64,
    pub cyc_s: f64,
    pub cyc_t: f64,
    pub seg: Option<f64>,
    pub mode: DiscMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mode: DiscMode,
    pub losses: SynthLossBreakdown,
    /// Summed discriminator objective (both domains).
    pub d_loss: f64,
}

/// A segmentation objective trained jointly with the synthesis networks.
/// Its loss is built on the graph of the translated batch `s'`, so its
/// gradients reach G_{S→T} and A_S.
pub trait JointObjective {
    /// λ5.
    fn lambda(&self) -> f64;
    /// Alternate synthesis and segmentation steps instead of summing them.
    fn alternating(&self) -> bool;
    fn loss<'g>(&mut self, g: &'g Graph<f32>, translated: Var<'g, f32>, batch: &[usize]) -> Result<Var<'g, f32>>;
    /// Applies the objective's own parameter update from a finished backward pass.
    fn update(&mut self, grads: &Gradients<f32>);
}

/// Where training artefacts go. Without a directory nothing is written.
#[derive(Debug, Clone, Default)]
pub struct TrainSink {
    pub dir: Option<PathBuf>,
    pub prefix: String,
}

impl TrainSink {
    pub fn new(dir: impl Into<PathBuf>, prefix: &str) -> Self {
        Self {
            dir: Some(dir.into()),
            prefix: prefix.to_string(),
        }
    }

    pub fn path(&self, suffix: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}{suffix}", self.prefix)))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.path("_log.jsonl")
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.path(".ckpt")
    }

    pub(crate) fn append_log(&self, line: &impl Serialize) -> Result<()> {
        if let Some(p) = self.log_path() {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(Error::io(d))?;
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(Error::io(&p))?;
            let mut text = serde_json::to_string(line)?;
            text.push('\n');
            f.write_all(text.as_bytes()).map_err(Error::io(&p))?;
        }
        Ok(())
    }

    /// Removes a stale log so a rerun starts clean.
    pub(crate) fn reset_log(&self) -> Result<()> {
        if let Some(p) = self.log_path() {
            if p.exists() {
                fs::remove_file(&p).map_err(Error::io(&p))?;
            }
        }
        Ok(())
    }
}

pub struct SynthesisTrainer {
    pub model: SynthesisModel,
    pub cfg: SynthesisConfig,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_joint: Adam<f32>,
    rng: ChaCha8Rng,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub sink: TrainSink,
}

impl SynthesisTrainer {
    pub fn new(model: SynthesisModel, cfg: SynthesisConfig, sink: TrainSink) -> Result<Self> {
        cfg.validate()?;
        let ps = &model.store;
        let (lr, b1, b2) = (cfg.learning_rate, cfg.beta1, cfg.beta2);
        let opt_g = Adam::new(ps, SynthesisNets::generator_params(ps), lr, b1, b2);
        let opt_d = Adam::new(ps, SynthesisNets::discriminator_params(ps), lr, b1, b2);
        let opt_joint = Adam::new(ps, SynthesisNets::forward_path_params(ps), lr, b1, b2);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            cfg,
            opt_g,
            opt_d,
            opt_joint,
            rng,
            steps: Vec::new(),
            epochs: Vec::new(),
            sink,
        })
    }

    /// Fresh model seeded from the config.
    pub fn from_arch(arch: SynthesisArch, cfg: SynthesisConfig, sink: TrainSink) -> Result<Self> {
        let model = SynthesisModel::new(arch, cfg.seed)?;
        Self::new(model, cfg, sink)
    }

    fn non_finite(&self, epoch: usize, detail: String) -> Error {
        let checkpoint = self.sink.path("_diagnostics.ckpt").and_then(|p| {
            let meta = serde_json::json!({ "epoch": epoch, "step": self.steps.len(), "detail": detail });
            self.model.to_checkpoint(meta).and_then(|c| c.save(&p)).ok().map(|_| p)
        });
        Error::NonFinite {
            epoch,
            step: self.steps.len(),
            detail,
            checkpoint,
        }
    }

    /// One generator/attention update followed by one discriminator update.
    pub fn step(
        &mut self,
        epoch: usize,
        source: &[&Image],
        target: &[&Image],
        batch: &[usize],
        mode: DiscMode,
        mut joint: Option<&mut (dyn JointObjective + '_)>,
    ) -> Result<StepRecord> {
        let obj = self.cfg.objective;
        let w = self.cfg.weights;
        let s_val = images_to_tensor::<f32>(source)?;
        let t_val = images_to_tensor::<f32>(target)?;
        for img in source.iter().chain(target) {
            let p = self.model.arch.patch_size;
            if img.dims() != (p, p) {
                return Err(Error::Shape(format!("training image {:?} vs patch {p}", img.dims())));
            }
        }

        // generator / attention side
        let g = Graph::new();
        let ps = &self.model.store;
        let nets = &self.model.nets;
        let f = cycle_forward(&g, ps, nets, g.constant(s_val.clone()), g.constant(t_val.clone()))?;
        let di = disc_inputs(&f, mode);
        let adv_s = generator_adversarial(obj, nets.d_t.forward(&g, ps, di.fake_t));
        let adv_t = generator_adversarial(obj, nets.d_s.forward(&g, ps, di.fake_s));
        let cyc_s = cycle_loss(f.s, f.s2)?;
        let cyc_t = cycle_loss(f.t, f.t2)?;
        let synth = synthesis_loss_var(adv_s, cyc_s, adv_t, cyc_t, &w);
        let mut losses = SynthLossBreakdown {
            adv_s: adv_s.item() as f64,
            adv_t: adv_t.item() as f64,
            cyc_s: cyc_s.item() as f64,
            cyc_t: cyc_t.item() as f64,
            seg: None,
        };
        let summed = joint.as_ref().is_some_and(|j| !j.alternating());
        let loss = match joint.as_deref_mut() {
            Some(j) if summed => {
                let seg = j.loss(&g, f.s1, batch)?;
                losses.seg = Some(seg.item() as f64);
                synth.add(seg.scale(j.lambda()))
            }
            _ => synth,
        };
        if !losses.is_finite() || !loss.item().is_finite() {
            return Err(self.non_finite(epoch, format!("generator losses {losses:?}")));
        }
        let grads = g.backward(loss);
        // Detached discriminator inputs from this forward pass.
        let d_in = [di.real_t, di.fake_t, di.real_s, di.fake_s].map(|v| (*v.value()).clone());
        self.opt_g.step(&mut self.model.store, &grads);
        if let Some(j) = joint.as_deref_mut().filter(|_| summed) {
            j.update(&grads);
        }
        drop(grads);

        if let Some(j) = joint.as_deref_mut().filter(|j| j.alternating()) {
            let g = Graph::new();
            let ps = &self.model.store;
            let (_, s1) = translate_forward(&g, ps, &self.model.nets, g.constant(s_val.clone()))?;
            let seg = j.loss(&g, s1, batch)?;
            losses.seg = Some(seg.item() as f64);
            if !seg.item().is_finite() {
                return Err(self.non_finite(epoch, format!("segmentation loss {}", seg.item())));
            }
            let grads = g.backward(seg.scale(j.lambda()));
            self.opt_joint.step(&mut self.model.store, &grads);
            j.update(&grads);
        }

        // discriminator side
        let g = Graph::new();
        let ps = &self.model.store;
        let nets = &self.model.nets;
        let [real_t, fake_t, real_s, fake_s] = d_in.map(|t| g.constant(t));
        let d_loss = discriminator_loss(obj, nets.d_t.forward(&g, ps, real_t), nets.d_t.forward(&g, ps, fake_t))
            .add(discriminator_loss(obj, nets.d_s.forward(&g, ps, real_s), nets.d_s.forward(&g, ps, fake_s)));
        let d_val = d_loss.item() as f64;
        if !d_val.is_finite() {
            return Err(self.non_finite(epoch, format!("discriminator loss {d_val}")));
        }
        let grads = g.backward(d_loss);
        self.opt_d.step(&mut self.model.store, &grads);

        let rec = StepRecord {
            epoch,
            step: self.steps.len(),
            mode,
            losses,
            d_loss: d_val,
        };
        self.steps.push(rec.clone());
        Ok(rec)
    }

    /// One pass over the source set with an independently shuffled target
    /// pool. Stops early after `max_steps` steps when given.
    pub fn run_epoch(
        &mut self,
        source: &[Image],
        target: &[Image],
        mut joint: Option<&mut (dyn JointObjective + '_)>,
        max_steps: Option<usize>,
    ) -> Result<EpochRecord> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Argument("synthesis training needs nonempty source and target sets".into()));
        }
        let epoch = self.model.epoch;
        let mode = DiscMode::for_epoch(epoch, self.cfg.switch_epoch);
        let mut order_s: Vec<usize> = (0..source.len()).collect();
        let mut order_t: Vec<usize> = (0..target.len()).collect();
        order_s.shuffle(&mut self.rng);
        order_t.shuffle(&mut self.rng);
        let bs = self.cfg.batch_size;
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        let mut seg_seen = false;
        for (j, chunk) in order_s.chunks(bs).enumerate() {
            if max_steps.is_some_and(|m| count >= m) {
                break;
            }
            let s: Vec<&Image> = chunk.iter().map(|&i| &source[i]).collect();
            let t: Vec<&Image> = (0..chunk.len())
                .map(|k| &target[order_t[(j * bs + k) % target.len()]])
                .collect();
            let rec = self.step(epoch, &s, &t, chunk, mode, joint.as_deref_mut())?;
            let l = rec.losses;
            for (acc, v) in sums.iter_mut().zip([l.adv_s, l.adv_t, l.cyc_s, l.cyc_t, l.seg.unwrap_or(0.0)]) {
                *acc += v;
            }
            seg_seen |= l.seg.is_some();
            count += 1;
        }
        let n = count.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            adv_s: sums[0] / n,
            adv_t: sums[1] / n,
            cyc_s: sums[2] / n,
            cyc_t: sums[3] / n,
            seg: seg_seen.then(|| sums[4] / n),
            mode,
        };
        self.model.epoch += 1;
        self.sink.append_log(&rec)?;
        self.epochs.push(rec.clone());
        let every = self.cfg.checkpoint_every;
        if every > 0 && self.model.epoch % every == 0 {
            self.save_checkpoint()?;
        }
        Ok(rec)
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(p) = self.sink.checkpoint_path() else { return Ok(None) };
        let meta = serde_json::json!({ "training": self.cfg });
        self.model.to_checkpoint(meta)?.save(&p)?;
        Ok(Some(p))
    }

    /// Runs the configured number of epochs and writes the final checkpoint.
    pub fn train(&mut self, source: &[Image], target: &[Image], mut joint: Option<&mut (dyn JointObjective + '_)>) -> Result<()> {
        self.sink.reset_log()?;
        while self.model.epoch < self.cfg.epochs {
            let rec = self.run_epoch(source, target, joint.as_deref_mut(), None)?;
            eprintln!(
                "[synthesis] epoch {} ({:?}): adv_s {:.4} adv_t {:.4} cyc_s {:.4} cyc_t {:.4}",
                rec.epoch, rec.mode, rec.adv_s, rec.adv_t, rec.cyc_s, rec.cyc_t
            );
        }
        self.save_checkpoint()?;
        Ok(())
    }
}

/// Trains a fresh model from scratch; artefacts go to `out_dir` when given.
pub fn train_synthesis(
    source: &[Image],
    target: &[Image],
    arch: SynthesisArch,
    cfg: SynthesisConfig,
    out_dir: Option<&Path>,
) -> Result<(SynthesisModel, Vec<EpochRecord>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Argument("synthesis training needs nonempty source and target sets".into()));
    }
    let sink = out_dir.map(|d| TrainSink::new(d, "synthesis")).unwrap_or_default();
    let mut trainer = SynthesisTrainer::from_arch(arch, cfg, sink)?;
    trainer.train(source, target, None)?;
    Ok((trainer.model, trainer.epochs))
}
