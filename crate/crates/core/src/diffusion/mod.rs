//! Denoising diffusion over codec latents, conditioned on the try-on inputs.

pub mod checkpoint;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, ScheduleMeta};
pub use sampler::{
    composite, decode_latents, initial_latent, sample_from, sample_images, sample_latents, timesteps, SampleConditions, SampleConfig,
    SamplerMode,
};
pub use schedule::{make_schedule, q_sample, NoiseSchedule};
pub use train::{
    compute_losses, dm_loss, draw_noise, prepare_samples, reported_total, DiffusionConfig, LogLine, LossTerms,
    Prediction, PreparedSample, TrainBatch, Trainer,
};
pub use unet::{Denoiser, DenoiserConfig, GarmentCondition};
