//! Concept domain correction: a membership critic over one-step-denoised points, the
//! adversarial objective, concept-preserving gradient surgery and the unlearning loop
//! with its ablation baselines.

mod disc;
mod surgery;
mod unlearn;

pub use disc::{
    adversarial_value, branch_accuracy, value_from_logits, value_tape, DiscriminatorNet,
    DISC_HIDDEN,
};
pub use surgery::{apply_surgery, surgery, surgery_per_tensor, SurgeryScope, DEGENERATE_NORM_SQ};
pub use unlearn::{
    discriminator_step, generator_retain_grad, generator_unlearn_grad, heldout_accuracy,
    pairwise_l2_grad, retain_batch, unlearn, Branches, DiscStepStats, GenOptimizer, LogRow, Method,
    NoisedBatch, ParamScope, Phase, RunLog, UnlearnAbort, UnlearnConfig, UnlearnRun,
    RUN_LOG_HEADER,
};
