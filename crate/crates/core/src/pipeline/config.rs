use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention_cyclegan::{GanObjective, LossWeights, SynthesisArch, SynthesisConfig};
use crate::data_io::{generate_phantom, read_raw_dataset, LabeledSlice, Modality, PhantomSpec};
use crate::error::{Error, Result};
use crate::htc_target::TargetDistribution;
use crate::segmentation::{ClassWeights, SegmenterArch, SegmenterConfig, DEFAULT_BBOX_MARGIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Synthesis and segmentation trained jointly on `λ5·L_seg + L_synth`.
    EndToEnd,
    /// Synthesis trained to completion and frozen, then the segmenter.
    TwoStage,
}

impl Strategy {
    /// Command-line spelling: `end2end` or `two-stage`.
    pub fn parse_cli(s: &str) -> Option<Self> {
        match s {
            "end2end" | "end-to-end" | "END_TO_END" => Some(Strategy::EndToEnd),
            "two-stage" | "TWO_STAGE" => Some(Strategy::TwoStage),
            _ => None,
        }
    }
}

/// Knobs below the stage contract; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTraining {
    /// Segmenter epochs; defaults to the stage's `epochs`. Under END_TO_END
    /// the first `epochs` of them are the joint epochs.
    pub segmenter_epochs: Option<usize>,
    pub synthesis_learning_rate: f64,
    pub segmenter_learning_rate: f64,
    pub batch_size: usize,
    pub objective: GanObjective,
    /// END_TO_END only: alternate synthesis and segmentation steps instead
    /// of summing their losses.
    pub alternating: bool,
    pub bbox_margin: usize,
    pub class_weights: Option<ClassWeights>,
    /// Caps synthesis steps per epoch (smoke and equivalence runs).
    pub max_steps: Option<usize>,
    pub synthesis_arch: Option<SynthesisArch>,
    pub segmenter_arch: Option<SegmenterArch>,
    /// Validation cases kept as montage panels.
    pub samples: usize,
}

impl Default for StageTraining {
    fn default() -> Self {
        Self {
            segmenter_epochs: None,
            synthesis_learning_rate: 1e-4,
            segmenter_learning_rate: 1e-3,
            batch_size: 4,
            objective: GanObjective::default(),
            alternating: false,
            bbox_margin: DEFAULT_BBOX_MARGIN,
            class_weights: None,
            max_steps: None,
            synthesis_arch: None,
            segmenter_arch: None,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// 1-based stage index `k`.
    pub stage: usize,
    /// Labels whose union is this stage's foreground.
    pub foreground: Vec<u8>,
    pub modality: Modality,
    pub patch_size: usize,
    pub target: TargetDistribution,
    pub weights: LossWeights,
    pub strategy: Strategy,
    pub epochs: usize,
    pub switch_epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub training: StageTraining,
}

impl StageConfig {
    /// Stage `k` of a nested phantom: foreground is every label `>= k`.
    pub fn nested(stage: usize, num_regions: usize, patch_size: usize, strategy: Strategy, epochs: usize, seed: u64) -> Self {
        Self {
            stage,
            foreground: (stage as u8..=num_regions as u8).collect(),
            modality: Modality::Phantom,
            patch_size,
            target: TargetDistribution::default(),
            weights: LossWeights::default(),
            strategy,
            epochs,
            switch_epoch: epochs / 3,
            seed,
            training: StageTraining::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == 0 {
            return Err(Error::Argument("stage indices start at 1".into()));
        }
        if self.foreground.is_empty() {
            return Err(Error::Argument(format!("stage {} has an empty foreground set", self.stage)));
        }
        if self.foreground.contains(&0) {
            return Err(Error::Argument("label 0 is background and cannot be foreground".into()));
        }
        self.weights.validate()?;
        self.target.validate()?;
        self.target.get(0)?;
        self.target.get(1)?;
        if self.training.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        self.synthesis_arch().validate()?;
        self.segmenter_arch().validate()?;
        Ok(())
    }

    pub fn synthesis_arch(&self) -> SynthesisArch {
        self.training
            .synthesis_arch
            .unwrap_or_else(|| SynthesisArch::for_patch(self.patch_size))
    }

    pub fn segmenter_arch(&self) -> SegmenterArch {
        self.training
            .segmenter_arch
            .unwrap_or_else(|| SegmenterArch::for_patch(self.patch_size))
    }

    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig {
            weights: self.weights,
            objective: self.training.objective,
            epochs: self.epochs,
            switch_epoch: self.switch_epoch,
            learning_rate: self.training.synthesis_learning_rate,
            batch_size: self.training.batch_size,
            seed: self.seed,
            ..SynthesisConfig::default()
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            epochs: self.training.segmenter_epochs.unwrap_or(self.epochs),
            learning_rate: self.training.segmenter_learning_rate,
            batch_size: self.training.batch_size,
            // a different stream from the synthesis networks
            seed: self.seed ^ 0x5e6_5e6,
            class_weights: self.training.class_weights,
            ..SegmenterConfig::default()
        }
    }
}

/// Checks every stage and the cascade invariants: indices 1..=K in order,
/// non-increasing patch sizes, strictly nested foreground sets.
pub fn validate_stages(stages: &[StageConfig]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Argument("no stages configured".into()));
    }
    for (i, s) in stages.iter().enumerate() {
        s.validate()?;
        if s.stage != i + 1 {
            return Err(Error::Argument(format!("stage {} listed at position {}", s.stage, i + 1)));
        }
    }
    for w in stages.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.patch_size > a.patch_size {
            return Err(Error::Argument(format!(
                "patch size grows from {} (stage {}) to {} (stage {})",
                a.patch_size, a.stage, b.patch_size, b.stage
            )));
        }
        let subset = b.foreground.iter().all(|l| a.foreground.contains(l));
        let strict = b.foreground.len() < a.foreground.len();
        if !(subset && strict) {
            return Err(Error::Argument(format!(
                "stage {} foreground {:?} is not strictly inside stage {} foreground {:?}",
                b.stage, b.foreground, a.stage, a.foreground
            )));
        }
    }
    Ok(())
}

/// Where an experiment's slices come from: raw dataset directories, or a
/// phantom specification generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Fraction of a phantom set held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Experiment {
    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut exp: Experiment = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = exp.data.train.as_mut() {
            resolve(p);
        }
        if let Some(p) = exp.data.test.as_mut() {
            resolve(p);
        }
        resolve(&mut exp.output_dir);
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        let d = &self.data;
        if d.phantom.is_none() && d.train.is_none() {
            return Err(Error::Argument("data needs a train directory or a phantom spec".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Argument(format!("test fraction {} outside [0, 1)", d.test_fraction)));
        }
        Ok(())
    }

    /// Training and held-out slices. A phantom set (or a train directory
    /// without a test directory) is split by `test_fraction`, the tail held
    /// out.
    pub fn load_data(&self) -> Result<(Vec<LabeledSlice>, Vec<LabeledSlice>)> {
        let d = &self.data;
        let mut all = match (&d.train, &d.phantom) {
            (Some(dir), _) => read_raw_dataset(dir)?.slices(),
            (None, Some(spec)) => generate_phantom(spec)?.into_iter().map(|s| s.source).collect(),
            (None, None) => return Err(Error::Argument("data needs a train directory or a phantom spec".into())),
        };
        if let Some(dir) = &d.test {
            return Ok((all, read_raw_dataset(dir)?.slices()));
        }
        let held = ((all.len() as f64 * d.test_fraction).round() as usize).min(all.len().saturating_sub(1));
        let test = all.split_off(all.len() - held);
        Ok((all, test))
    }
}
