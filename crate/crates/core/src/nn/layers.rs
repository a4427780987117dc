use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::mask::AttentionMask;
use super::params::Bound;
use crate::autodiff::{Graph, Var};
use crate::data::TokenMatrix;
use crate::rng::Rng;
use crate::{Error, Real, Result, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Inverted dropout. Without an RNG (evaluation) it is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }
}

pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, d: &mut Dropout) -> Result<Var> {
    if !d.is_active() {
        return Ok(x);
    }
    let rate = d.rate;
    let keep = T::of(1.0 / (1.0 - rate));
    let rng = d.rng.as_mut().expect("active dropout has an rng");
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    g.mul_const(x, &mask)
}

/// `x · W + b` over the last axis of `x`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / fan_in.max(1);
    let x2 = g.reshape(x, &[rows, fan_in])?;
    let y = g.matmul(x2, w)?;
    let y = g.add_bias(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = g.shape(w)[1];
    g.reshape(y, &out_shape)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, T::of(LN_EPS))
}

/// Position-wise `W₂ · relu(W₁ x)`.
pub fn feed_forward<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, drop: &mut Dropout) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.w1"), x)?;
    let h = g.relu(h);
    let h = dropout(g, h, drop)?;
    linear(g, p, &format!("{prefix}.w2"), h)
}

/// Embedding rows for a `B×L` id matrix as a `B×L×H` tensor, optionally scaled by `√H`.
pub fn embed<T: Real>(g: &mut Graph<T>, table: Var, ids: &TokenMatrix, scale: bool) -> Result<Var> {
    let h = g.shape(table)[1];
    let e = g.embedding(table, &ids.ids_usize())?;
    let e = g.reshape(e, &[ids.rows, ids.cols, h])?;
    Ok(if scale { g.scale(e, T::of(libm::sqrt(h as f64))) } else { e })
}

/// Fixed sinusoidal encodings, one `h`-wide row per entry of `positions`.
pub fn sinusoidal_table<T: Real>(positions: &[usize], h: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * h);
    for &pos in positions {
        for i in 0..h {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / h as f64);
            data.push(T::of(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::from_fn(&[positions.len(), h], |i| data[i])
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, h) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, h / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, h / heads])
}

/// Scaled dot-product attention with `heads` heads. Masked scores receive an
/// additive `-inf` before the softmax.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    query: Var,
    memory: Var,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Var> {
    let qs = g.shape(query).to_vec();
    let ks = g.shape(memory).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (b, lq, h) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!("hidden size {h} is not divisible by {heads} heads")));
    }
    let dh = h / heads;
    let q = linear(g, p, &format!("{prefix}.wq"), query)?;
    let k = linear(g, p, &format!("{prefix}.wk"), memory)?;
    let v = linear(g, p, &format!("{prefix}.wv"), memory)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let scores = g.bmm_nt(q, k)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let scores = match mask {
        AttentionMask::None => scores,
        m => {
            let bias = m.bias(b, heads, lq, lk)?;
            g.add_const(scores, &bias)?
        }
    };
    let att = g.softmax(scores)?;
    let ctx = g.bmm(att, v)?;
    let ctx = g.reshape(ctx, &[b, heads, lq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, lq, h])?;
    linear(g, p, &format!("{prefix}.wo"), ctx)
}

/// Mean negative log-likelihood of `targets` under `logits: B×L×V`, counting
/// only positions `< lengths[b]` (teacher forcing: targets are the decoder
/// inputs shifted by one).
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: &TokenMatrix, lengths: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] != targets.rows || s[1] != targets.cols || lengths.len() != targets.rows {
        return Err(Error::shape("cross_entropy", &s, &[targets.rows, targets.cols]));
    }
    let mut weights = Vec::with_capacity(targets.rows * targets.cols);
    for &len in lengths {
        for c in 0..targets.cols {
            weights.push(if c < len { T::one() } else { T::zero() });
        }
    }
    g.cross_entropy(logits, &targets.ids_usize(), &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng;
    use alloc::vec;

    fn attn_params(h: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let mut r = rng::stream(3, 0);
        for name in ["wq", "wk", "wv", "wo"] {
            p.init_linear(&format!("att.{name}"), h, h, &mut r).unwrap();
        }
        p
    }

    #[test]
    fn embed_lookup_and_scaling() {
        let mut g = Graph::new();
        let table = g.param(Tensor::<f64>::from_fn(&[3, 4], |i| i as f64));
        let ids = TokenMatrix::from_rows(&[&[0]]);
        let e = embed(&mut g, table, &ids, false).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 1.0, 2.0, 3.0]);
        let ids = TokenMatrix::from_rows(&[&[1]]);
        let e = embed(&mut g, table, &ids, true).unwrap();
        assert_eq!(g.value(e).data(), &[8.0, 10.0, 12.0, 14.0]);
        assert!(embed(&mut g, table, &TokenMatrix::from_rows(&[&[3]]), false).is_err());
    }

    #[test]
    fn embedding_grad_counts_ids() {
        let mut g = Graph::new();
        let table = g.param(Tensor::<f64>::zeros(&[4, 2]));
        let ids = TokenMatrix::from_rows(&[&[1, 1, 3], &[1, 0, 0]]);
        let e = embed(&mut g, table, &ids, false).unwrap();
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[2.0, 2.0, 3.0, 3.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let h = 4;
        let p = attn_params(h);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[1, 1, h], |i| 0.3 * i as f64 - 0.2));
        let out = multi_head_attention(&mut g, &b, "att", x, x, &AttentionMask::None, 2).unwrap();
        let v = linear(&mut g, &b, "att.wv", x).unwrap();
        let want = linear(&mut g, &b, "att.wo", v).unwrap();
        let (o, w) = (g.value(out).data(), g.value(want).data());
        for (a, b) in o.iter().zip(w) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_position_zero_sees_only_itself() {
        let h = 4;
        let p = attn_params(h);
        let run = |second: f64| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let mut data = vec![0.5, -0.1, 0.2, 0.9];
            data.extend([second; 4]);
            let x = g.constant(Tensor::new(&[1, 2, h], data).unwrap());
            let out = multi_head_attention(&mut g, &b, "att", x, x, &AttentionMask::Causal { key_lengths: None }, 1).unwrap();
            g.value(out).data()[..h].to_vec()
        };
        assert_eq!(run(0.0), run(7.0));
    }

    #[test]
    fn hand_computed_two_token_attention() {
        // identity projections, zero biases, one head of width 2
        let mut p = ParamStore::<f64>::new();
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("att.{name}.weight"), Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
            p.init_const(&format!("att.{name}.bias"), &[2], 0.0).unwrap();
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap());
        let out = multi_head_attention(&mut g, &b, "att", x, x, &AttentionMask::None, 1).unwrap();
        // scores/√2: row0 = [1, 0]/√2, row1 = [0, 4]/√2
        let s = 2f64.sqrt();
        let w0 = [1.0 / s, 0.0].map(f64::exp);
        let w1 = [0.0, 4.0 / s].map(f64::exp);
        let (z0, z1) = (w0[0] + w0[1], w1[0] + w1[1]);
        let want = [w0[0] / z0, 2.0 * w0[1] / z0, w1[0] / z1, 2.0 * w1[1] / z1];
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn heads_must_divide_hidden() {
        let p = attn_params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 4]));
        let err = multi_head_attention(&mut g, &b, "att", x, x, &AttentionMask::None, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cross_entropy_masks_padding_and_limits_to_zero() {
        let mut g = Graph::new();
        let margin = 40.0;
        let mut data = vec![0.0; 2 * 3];
        data[1] = margin;
        data[3 + 2] = margin;
        let logits = g.constant(Tensor::new(&[1, 2, 3], data).unwrap());
        let targets = TokenMatrix::from_rows(&[&[1, 0]]);
        let l = cross_entropy(&mut g, logits, &targets, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-15);
        assert!(cross_entropy(&mut g, logits, &targets, &[0]).is_err());
    }

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoidal_table::<f64>(&[0, 1], 4);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((t.data()[6] - (0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_deterministic_and_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[100], 1.0));
        let mut d = Dropout::eval();
        assert_eq!(dropout(&mut g, x, &mut d).unwrap(), x);
        let mut d1 = Dropout::train(0.5, rng::stream(1, 1));
        let mut d2 = Dropout::train(0.5, rng::stream(1, 1));
        let a = dropout(&mut g, x, &mut d1).unwrap();
        let b = dropout(&mut g, x, &mut d2).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
