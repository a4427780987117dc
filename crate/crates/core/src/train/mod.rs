//! Optimization: Adam, learning-rate schedules, gradient clipping and the
//! epoch loop that joins cross-entropy with the reconstruction term.
//!
//! The loop is pure: given the configuration and the data it produces the
//! same parameters and [`MetricRecord`] stream every time. Persisting
//! checkpoints and metrics is left to the caller between epochs.

mod lr;
mod optim;
mod trainer;

pub use lr::{noam_lr, LrSchedule};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use trainer::{evaluate, EvalReport, MetricRecord, TrainConfig, Trainer};

#[cfg(test)]
mod tests;
