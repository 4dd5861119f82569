//! Forward perturbation, training objective, noise schedule, probability-flow
//! sampling, the training loop and trajectory prediction.

mod config;
pub mod loss;
mod pairs;
mod predict;
mod sampler;
mod schedule;
mod train;

pub use config::{DiffusionConfig, LossWeighting, SamplerKind};
pub use loss::{denoising_loss, draw_loss_noise, loss_weight, regression_loss, LossNoise, LossOutput};
pub use pairs::{build_training_pairs, condition_at, PairingPolicy, TrainSet, TrainingPair};
pub use predict::{
    baseline_condition, predict_cohort, predict_trajectory, read_predictions_csv, write_predictions_csv, PredictOptions,
    Prediction,
};
pub use sampler::{euler_sample, heun_sample, initial_noise, perturb, run, sample, sample_sigma_train};
pub use schedule::sigma_schedule;
pub use train::{train, write_loss_log, LossRecord, TrainConfig, TrainJob, Trainer};

#[cfg(test)]
mod tests;
