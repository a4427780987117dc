//! Bidirectional awareness induction: pivots reconstruct the target
//! embeddings, and the reconstruction error joins the cross-entropy loss.
//!
//! 1. [`select_pivots`] picks the pivot features of a forward pass.
//! 2. [`reconstruct`] equalizes them to the target length.
//! 3. [`joint_loss`] adds `λ·β` to the cross-entropy, with `λ` from a
//!    [`LambdaSchedule`].

pub mod equalize;
mod loss;
mod pivots;
mod schedule;

pub use equalize::{equalize_expansion, equalize_transformer, expansion_recombine, PHI_EPS};
pub use loss::{bai_mse, joint_loss, BaiLossReport};
pub use pivots::{reconstruct, select_pivots, PivotRoute};
pub use schedule::{
    lambda_weight, LambdaSchedule, ScheduleShape, EQ5_ETA, EQ5_GAMMA, EQ5_PHI, PRESET_RAMP_EPOCHS,
};

#[cfg(test)]
mod tests;
