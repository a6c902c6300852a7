//! Normalization-parameter tweaking of quantized blocks.

mod adam;
mod config;
mod loss;
mod pipeline;
mod report;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{ReferenceInput, TweakConfig, DEFAULT_LR_GRID};
pub use loss::{
    channel_stats, delta_mu, delta_var, layer_loss, loss_dist, loss_kl, loss_mse, record_loss,
    ActivationStats, LossKind,
};
pub use pipeline::{tweak_model, tweak_model_timed};
pub use report::{LayerReport, LrCandidate, TweakReport};
pub use schedule::{layer_lr, TweakSchedule};
