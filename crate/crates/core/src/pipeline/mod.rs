//! The K-stage cascade: per-stage HTC synthesis and segmentation under the
//! two-stage or end-to-end strategy, and composition of the stage masks into
//! one nested label map.

mod cascade;
mod config;
mod stage;

pub use crate::attention_cyclegan::total_loss;
pub use cascade::{
    run_cascade, train_cascade, training_crops, CascadeCase, CascadeResult, OraclePredictor, StageOutput,
    StagePredictor,
};
pub use config::{validate_stages, DataConfig, Experiment, StageConfig, StageTraining, Strategy};
pub use stage::{
    load_stage, run_stage, translate_all, write_samples, StageModels, StagePrediction, StageResult, SAMPLE_PANELS,
    STAGE_FILE,
};
