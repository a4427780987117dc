use core::fmt::{Debug, Display};

use num_traits::{Float, FloatConst};

/// Scalar width used by the numerical stack. Gradient checks run on `f64`,
/// training defaults to `f32`.
pub trait Real:
    Float + FloatConst + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `exp` through libm. `Float::exp` switches to the platform's libm when
    /// some other crate in the build enables `num-traits/std`, which would
    /// make trajectories depend on feature unification.
    fn exp_portable(self) -> Self;
    /// `ln` through libm, for the same reason as [`Real::exp_portable`].
    fn ln_portable(self) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_portable(self) -> Self {
        libm::expf(self)
    }

    #[inline]
    fn ln_portable(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_portable(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn ln_portable(self) -> Self {
        libm::log(self)
    }
}
