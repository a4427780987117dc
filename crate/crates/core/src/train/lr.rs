use alloc::format;

use crate::{Error, Result};

/// Learning-rate schedules. Steps count from 1, epochs from 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// `factor · H^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
    Noam { hidden: usize, warmup: u64, factor: f64 },
    Fixed { value: f64 },
    /// `base · factor^⌊epoch / every⌋`.
    StepDecay { base: f64, factor: f64, every: u64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Noam { hidden, warmup, factor } => hidden > 0 && warmup > 0 && factor > 0.0,
            LrSchedule::Fixed { value } => value > 0.0,
            LrSchedule::StepDecay { base, factor, every } => base > 0.0 && factor > 0.0 && every > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn rate(&self, step: u64, epoch: u64) -> f64 {
        match *self {
            LrSchedule::Noam { hidden, warmup, factor } => factor * noam_lr(step, hidden, warmup),
            LrSchedule::Fixed { value } => value,
            LrSchedule::StepDecay { base, factor, every } => base * libm::pow(factor, (epoch / every) as f64),
        }
    }
}

/// `H^−0.5 · min(step^−0.5, step · warmup^−1.5)`; `step` is clamped to 1.
pub fn noam_lr(step: u64, hidden: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup as f64;
    let h = hidden as f64;
    libm::pow(h, -0.5) * f64::min(libm::pow(s, -0.5), s * libm::pow(w, -1.5))
}
