//! Pieces shared by the three architectures.

use alloc::format;
use alloc::vec::Vec;

use super::config::{Arch, ModelConfig, TargetEmbedding};
use super::TargetOptions;
use crate::autodiff::{Graph, Var};
use crate::data::TokenMatrix;
use crate::nn::{self, AttentionMask, Bound, Dropout, ParamStore};
use crate::rng::Rng;
use crate::{Real, Result, Tensor};

fn init_attention(p: &mut ParamStore<f64>, prefix: &str, h: usize, rng: &mut Rng) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        p.init_linear(&format!("{prefix}.{w}"), h, h, rng)?;
    }
    Ok(())
}

fn init_ff(p: &mut ParamStore<f64>, prefix: &str, h: usize, ff: usize, rng: &mut Rng) -> Result<()> {
    p.init_linear(&format!("{prefix}.w1"), h, ff, rng)?;
    p.init_linear(&format!("{prefix}.w2"), ff, h, rng)
}

pub(super) fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore<f64>> {
    let (h, ff) = (cfg.hidden, cfg.ff_size);
    let mut p = ParamStore::new();
    p.init_normal("embed.weight", &[cfg.vocab, h], 1.0 / libm::sqrt(h as f64), rng)?;
    if cfg.arch != Arch::DecoderOnly {
        for l in 0..cfg.layers {
            let pre = format!("enc.{l}");
            match cfg.arch {
                Arch::Expansion => {
                    for &gs in &cfg.expansion_groups {
                        p.init_glorot(&format!("{pre}.expand.query.{gs}"), gs, h, rng)?;
                    }
                    p.init_linear(&format!("{pre}.expand.proj"), h, h, rng)?;
                }
                _ => init_attention(&mut p, &format!("{pre}.self_attn"), h, rng)?,
            }
            p.init_layer_norm(&format!("{pre}.ln1"), h)?;
            init_ff(&mut p, &format!("{pre}.ff"), h, ff, rng)?;
            p.init_layer_norm(&format!("{pre}.ln2"), h)?;
        }
    }
    for l in 0..cfg.layers {
        let pre = format!("dec.{l}");
        init_attention(&mut p, &format!("{pre}.self_attn"), h, rng)?;
        p.init_layer_norm(&format!("{pre}.ln1"), h)?;
        if cfg.arch != Arch::DecoderOnly {
            init_attention(&mut p, &format!("{pre}.cross_attn"), h, rng)?;
            p.init_layer_norm(&format!("{pre}.ln_cross"), h)?;
        }
        init_ff(&mut p, &format!("{pre}.ff"), h, ff, rng)?;
        p.init_layer_norm(&format!("{pre}.ln2"), h)?;
    }
    if !cfg.tie_embeddings {
        p.init_glorot("out.weight", h, cfg.vocab, rng)?;
    }
    p.init_const("out.bias", &[cfg.vocab], 0.0)?;
    Ok(p)
}

/// Positional table tiled to `B×L×H` for per-slot positions.
pub(super) fn positions_tensor<T: Real>(positions: &[usize], rows: usize, cols: usize, h: usize) -> Result<Tensor<T>> {
    debug_assert_eq!(positions.len(), rows * cols);
    nn::sinusoidal_table::<T>(positions, h).reshape(&[rows, cols, h])
}

pub(super) fn sequential_positions(rows: usize, cols: usize) -> Vec<usize> {
    (0..rows).flat_map(|_| 0..cols).collect()
}

/// Token embeddings (optionally `√H`-scaled) plus positional encodings at `positions`.
pub(super) fn input_embedding<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    ids: &TokenMatrix,
    positions: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    let table = p.get("embed.weight")?;
    let e = nn::embed(g, table, ids, cfg.scale_embeddings)?;
    let pe = positions_tensor(positions, ids.rows, ids.cols, cfg.hidden)?;
    let e = g.add_const(e, &pe)?;
    nn::dropout(g, e, drop)
}

/// Target embeddings `D` of `ids`.
pub(super) fn target_embedding<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    ids: &TokenMatrix,
    positions: &[usize],
    opts: TargetOptions,
) -> Result<Var> {
    let mut table = p.get("embed.weight")?;
    if opts.detach {
        table = g.detach(table);
    }
    let scaled = opts.embedding != TargetEmbedding::Raw;
    let d = nn::embed(g, table, ids, scaled)?;
    if opts.embedding == TargetEmbedding::Positional {
        let pe = positions_tensor(positions, ids.rows, ids.cols, cfg.hidden)?;
        return g.add_const(d, &pe);
    }
    Ok(d)
}

/// `LayerNorm(x + Dropout(sub))`.
pub(super) fn residual_norm<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ln: &str,
    x: Var,
    sub: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let sub = nn::dropout(g, sub, drop)?;
    let y = g.add(x, sub)?;
    nn::layer_norm(g, p, ln, y)
}

/// Post-norm encoder layer with self-attention.
pub(super) fn encoder_layer<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    l: usize,
    x: Var,
    mask: &AttentionMask,
    drop: &mut Dropout,
) -> Result<Var> {
    let pre = format!("enc.{l}");
    let a = nn::multi_head_attention(g, p, &format!("{pre}.self_attn"), x, x, mask, cfg.heads)?;
    let x = residual_norm(g, p, &format!("{pre}.ln1"), x, a, drop)?;
    feed_forward_sublayer(g, p, &pre, x, drop)
}

pub(super) fn feed_forward_sublayer<T: Real>(g: &mut Graph<T>, p: &Bound, pre: &str, x: Var, drop: &mut Dropout) -> Result<Var> {
    let f = nn::feed_forward(g, p, &format!("{pre}.ff"), x, drop)?;
    residual_norm(g, p, &format!("{pre}.ln2"), x, f, drop)
}

/// Post-norm decoder layer; cross-attention is skipped when `memory` is `None`.
#[allow(clippy::too_many_arguments)]
pub(super) fn decoder_layer<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    l: usize,
    y: Var,
    self_mask: &AttentionMask,
    memory: Option<(Var, &AttentionMask)>,
    drop: &mut Dropout,
) -> Result<Var> {
    let pre = format!("dec.{l}");
    let a = nn::multi_head_attention(g, p, &format!("{pre}.self_attn"), y, y, self_mask, cfg.heads)?;
    let mut y = residual_norm(g, p, &format!("{pre}.ln1"), y, a, drop)?;
    if let Some((mem, mask)) = memory {
        let c = nn::multi_head_attention(g, p, &format!("{pre}.cross_attn"), y, mem, mask, cfg.heads)?;
        y = residual_norm(g, p, &format!("{pre}.ln_cross"), y, c, drop)?;
    }
    feed_forward_sublayer(g, p, &pre, y, drop)
}

/// Vocabulary logits of `B×M×H` decoder states.
pub(super) fn output_logits<T: Real>(cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    let (b, m, h) = (s[0], s[1], s[2]);
    let w = if cfg.tie_embeddings {
        let table = p.get("embed.weight")?;
        g.transpose(table)?
    } else {
        p.get("out.weight")?
    };
    let y2 = g.reshape(y, &[b * m, h])?;
    let z = g.matmul(y2, w)?;
    let z = g.add_bias(z, p.get("out.bias")?)?;
    g.reshape(z, &[b, m, cfg.vocab])
}
