//! Training objectives and the optimization loop.

mod losses;
mod optim;
mod trainer;

pub use losses::{
    duration_loss, masked_mse, otcfm_interpolant, otcfm_loss, otcfm_loss_at, prior_loss, score_from_output,
    score_matching_loss, score_matching_loss_at, OtcfmConfig, ScoreMatchingConfig, VectorField, SM_T_EPS,
};
pub use optim::{clip_grad_norm, Adam, AdamConfig, Precision};
pub use trainer::{align_dataset, train, MetricsRecord, StepLosses, Trainer, TrainConfig};
