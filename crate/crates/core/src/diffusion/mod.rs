//! Conditional DDPM machinery: cosine noise schedule, forward noising, the conditional
//! noise predictor, its training loss, one-step denoising and sampling.

mod denoiser;
mod process;
mod schedule;
mod snapshot;
mod train;

pub use denoiser::{DenoiserArch, DenoiserNet, NoisePredictor, DATA_DIM};
pub(crate) use process::grads_of;
pub use process::{
    add_noise, denoise_step, denoise_step_tape, diffusion_loss_grad, diffusion_loss_tape,
    noise_with_alpha_bar, reverse_step_tape, reverse_step_values, sample, standard_normal,
    uniform_timesteps,
};
pub use schedule::{
    time_embedding, NoiseSchedule, COSINE_OFFSET, DEFAULT_X0_CLIP, MAX_BETA, TIME_EMBED_DIM,
};
pub use snapshot::{sidecar_path, ModelSnapshot, SnapshotMeta, SnapshotSidecar};
pub use train::{loss_digest, train_base, BaseTrainConfig, TrainedBase};
