//! Attention-guided cycle-consistent translation between source MR slices
//! and HTC images: two generators, two attention networks, two patch
//! discriminators, their losses and the two-phase training schedule.

mod loss;
mod model;
mod nets;
mod train;

pub use loss::{
    adversarial_loss, adversarial_loss_values, compose_images, compose_translation, cycle_loss,
    discriminator_loss, generator_adversarial, synthesis_loss, synthesis_loss_var, total_loss, GanObjective,
    LossWeights, SynthLossBreakdown, PROB_EPS,
};
pub use model::{
    cycle_forward, disc_inputs, translate_forward, CycleForward, DiscInputs, DiscMode, SynthesisArch,
    SynthesisModel, SynthesisNets,
};
pub use nets::{AttentionConfig, AttentionNet, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
pub use train::{
    train_synthesis, EpochRecord, JointObjective, StepRecord, SynthesisConfig, SynthesisTrainer, TrainSink,
};
