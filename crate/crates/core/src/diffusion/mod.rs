//! Conditional diffusion: noise schedule, ε-predictor, guidance rules and the
//! segmented DDIM sampler.

pub mod analytic;
pub mod model;
pub mod sampler;
pub mod schedule;

pub use analytic::AnalyticDenoiser;
pub use model::{time_embedding, train_denoiser, DenoiserMeta, DenoiserModel, DenoiserTrainConfig, LossPoint, NoisePredictor, NoisedBatch};
pub use sampler::*;
pub use schedule::{NoiseSchedule, ScheduleSpec};
