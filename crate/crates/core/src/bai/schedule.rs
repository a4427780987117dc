//! Weight schedules `Λ(t)` for the reconstruction term.
//!
//! `t` counts optimizer steps and `T` is the number of steps per epoch, so
//! every shape is a function of the epoch fraction `x = t / T`.

use alloc::format;

use crate::{Error, Result};

/// Default `η`, `γ` and `φ` of the logistic schedule.
pub const EQ5_ETA: f64 = 1e-3;
pub const EQ5_GAMMA: f64 = 0.5;
pub const EQ5_PHI: f64 = 15.0;

/// Epochs over which the linear presets ramp.
pub const PRESET_RAMP_EPOCHS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleShape {
    /// `η + (1 − η) / (1 + exp(−(x − φ)/γ))`.
    Logistic { eta: f64, gamma: f64, phi: f64 },
    Const { value: f64 },
    /// `from + (to − from)·min(x / epochs, 1)`; covers both ramp directions.
    Linear { from: f64, to: f64, epochs: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub shape: ScheduleShape,
    /// Optimizer steps per epoch (`T`).
    pub iters_per_epoch: usize,
}

impl LambdaSchedule {
    pub fn new(shape: ScheduleShape, iters_per_epoch: usize) -> Result<Self> {
        let s = LambdaSchedule { shape, iters_per_epoch };
        s.validate()?;
        Ok(s)
    }

    /// Named schedules: `eq5`/`lstar` (logistic with the defaults above),
    /// `l1` … `l5`, and the parametric kinds `const` (1), `linear_up`
    /// (1e-6 → 1) and `linear_down` (1 → 1e-6) over 30 epochs.
    pub fn preset(name: &str, iters_per_epoch: usize) -> Result<Self> {
        let up = ScheduleShape::Linear {
            from: 1e-6,
            to: 1.0,
            epochs: PRESET_RAMP_EPOCHS,
        };
        let down = ScheduleShape::Linear {
            from: 1.0,
            to: 1e-6,
            epochs: PRESET_RAMP_EPOCHS,
        };
        let shape = match name {
            "eq5" | "lstar" => ScheduleShape::Logistic {
                eta: EQ5_ETA,
                gamma: EQ5_GAMMA,
                phi: EQ5_PHI,
            },
            "l1" => ScheduleShape::Const { value: 1e-3 },
            "l2" => ScheduleShape::Const { value: 1e-6 },
            "l3" | "const" => ScheduleShape::Const { value: 1.0 },
            "l4" | "linear_up" => up,
            "l5" | "linear_down" => down,
            _ => return Err(Error::Config(format!("unknown lambda schedule {name:?}"))),
        };
        Self::new(shape, iters_per_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters_per_epoch == 0 {
            return Err(Error::Config("lambda schedule needs at least one iteration per epoch".into()));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("lambda {name} must lie in [0, 1], got {v}")))
            }
        };
        match self.shape {
            ScheduleShape::Logistic { eta, gamma, phi } => {
                unit("eta", eta)?;
                if !(gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::Config(format!("lambda gamma must be positive, got {gamma}")));
                }
                if !phi.is_finite() {
                    return Err(Error::Config("lambda phi must be finite".into()));
                }
            }
            ScheduleShape::Const { value } => unit("value", value)?,
            ScheduleShape::Linear { from, to, epochs } => {
                unit("start", from)?;
                unit("end", to)?;
                if !(epochs > 0.0) {
                    return Err(Error::Config(format!("lambda ramp length must be positive, got {epochs}")));
                }
            }
        }
        Ok(())
    }

    /// `Λ(t)` at optimizer step `t`.
    pub fn weight(&self, t: u64) -> Result<f64> {
        self.validate()?;
        Ok(self.at_epoch_fraction(t as f64 / self.iters_per_epoch as f64))
    }

    /// The schedule as a function of `x = t / T` (no validation).
    pub fn at_epoch_fraction(&self, x: f64) -> f64 {
        match self.shape {
            ScheduleShape::Logistic { eta, gamma, phi } => {
                eta + (1.0 - eta) / (1.0 + libm::exp(-(x - phi) / gamma))
            }
            ScheduleShape::Const { value } => value,
            ScheduleShape::Linear { from, to, epochs } => {
                let f = x / epochs;
                if f <= 0.0 {
                    from
                } else if f >= 1.0 {
                    to
                } else {
                    from + (to - from) * f
                }
            }
        }
    }
}

/// `Λ(t)` for `sched`.
pub fn lambda_weight(sched: &LambdaSchedule, t: u64) -> Result<f64> {
    sched.weight(t)
}
