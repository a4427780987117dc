use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::rng::Rng;
use crate::{Error, Real, Result, Tensor};

/// Named parameters keyed by dot-separated paths (`enc.0.self_attn.wq.weight`).
/// Iteration order is the lexical order of the paths.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a graph leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Gradients of a bound store after `backward`. Parameters the loss did not
    /// reach get zeros.
    pub fn gradients(&self, g: &Graph<T>, bound: &Bound) -> ParamStore<T> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let grad = bound
                    .vars
                    .get(k)
                    .and_then(|&var| g.grad_tensor(var))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), grad)
            })
            .collect();
        ParamStore { map }
    }

    // ---- initializers ----

    /// Glorot-uniform matrix `fan_in × fan_out`.
    pub fn init_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)));
        self.insert(name, t)
    }

    /// `N(0, std²)` entries, drawn by Box–Muller through libm so the values
    /// do not depend on which float backend the build happens to link.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<()> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Config(format!("normal init needs a positive finite std, got {std}")));
        }
        let mut spare = None;
        let t = Tensor::from_fn(shape, |_| {
            let z = spare.take().unwrap_or_else(|| {
                let u1 = 1.0 - rng.random::<f64>();
                let u2 = rng.random::<f64>();
                let r = libm::sqrt(-2.0 * libm::log(u1));
                let theta = 2.0 * core::f64::consts::PI * u2;
                spare = Some(r * libm::sin(theta));
                r * libm::cos(theta)
            });
            T::of(std * z)
        });
        self.insert(name, t)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::of(value)))
    }

    /// Linear layer `weight: in×out` (Glorot) and `bias: out` (zeros).
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        self.init_glorot(&format!("{prefix}.weight"), fan_in, fan_out, rng)?;
        self.init_const(&format!("{prefix}.bias"), &[fan_out], 0.0)
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.init_const(&format!("{prefix}.gain"), &[dim], 1.0)?;
        self.init_const(&format!("{prefix}.bias"), &[dim], 0.0)
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.vars.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut p = ParamStore::<f64>::new();
        p.init_const("a.b", &[2], 0.0).unwrap();
        assert!(p.init_const("a.b", &[2], 1.0).is_err());
    }

    #[test]
    fn bound_parameters_require_grad() {
        let mut p = ParamStore::<f64>::new();
        let mut r = rng::stream(0, 0);
        p.init_linear("lin", 3, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        for (_, v) in b.vars() {
            assert!(g.requires_grad(v));
        }
        assert_eq!(b.names(), ["lin.bias", "lin.weight"]);
        let w = p.get("lin.weight").unwrap();
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }
}
