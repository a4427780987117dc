use alloc::format;

use crate::nn::ParamStore;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Number of updates applied so far.
    pub step: u64,
}

fn zeros_like<T: Real>(p: &ParamStore<T>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, t) in p.iter() {
        out.insert(name, Tensor::zeros(t.shape())).expect("names are unique");
    }
    out
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Adam {
            config,
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
        }
    }

    /// One update with learning rate `lr`. Gradients are checked before any
    /// state changes, so a NaN leaves parameters and moments untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric(format!("NaN gradient in parameter {name}")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = T::of(1.0 - libm::pow(beta1, t as f64));
        let c2 = T::of(1.0 - libm::pow(beta2, t as f64));
        let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.m.get_mut(name).expect("moments mirror params").data_mut();
            let v = self.v.get_mut(name).expect("moments mirror params").data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Real>(grads: &ParamStore<T>) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| {
            let x = x.f64();
            x * x
        })
        .sum();
    libm::sqrt(sq)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}
