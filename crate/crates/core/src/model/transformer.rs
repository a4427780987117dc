use super::blocks;
use super::config::ModelConfig;
use super::{ForwardOutput, PivotSet, TargetOptions};
use crate::autodiff::{Graph, Var};
use crate::data::Batch;
use crate::nn::{AttentionMask, Bound, Dropout};
use crate::{Real, Result};

/// Encoder stack over the source; returns the final states `Ē`.
pub(super) fn encode<T: Real>(cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, batch: &Batch, drop: &mut Dropout) -> Result<Var> {
    let src = &batch.src;
    let pos = blocks::sequential_positions(src.rows, src.cols);
    let mut x = blocks::input_embedding(cfg, g, p, src, &pos, drop)?;
    let mask = AttentionMask::Padding {
        key_lengths: batch.src_lengths.clone(),
    };
    for l in 0..cfg.layers {
        x = blocks::encoder_layer(cfg, g, p, l, x, &mask, drop)?;
    }
    Ok(x)
}

/// Teacher-forced decoder over `memory`; returns logits and the target embeddings.
pub(super) fn decode<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch,
    memory: Var,
    target: TargetOptions,
    drop: &mut Dropout,
) -> Result<(Var, Var)> {
    let tgt = &batch.tgt_in;
    let pos = blocks::sequential_positions(tgt.rows, tgt.cols);
    let mut y = blocks::input_embedding(cfg, g, p, tgt, &pos, drop)?;
    let self_mask = AttentionMask::Causal {
        key_lengths: Some(batch.tgt_lengths.clone()),
    };
    let cross_mask = AttentionMask::Padding {
        key_lengths: batch.src_lengths.clone(),
    };
    for l in 0..cfg.layers {
        y = blocks::decoder_layer(cfg, g, p, l, y, &self_mask, Some((memory, &cross_mask)), drop)?;
    }
    let logits = blocks::output_logits(cfg, g, p, y)?;
    let d = blocks::target_embedding(cfg, g, p, &batch.tgt_out, &pos, target)?;
    Ok((logits, d))
}

pub(super) fn forward<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch,
    target: TargetOptions,
    drop: &mut Dropout,
) -> Result<ForwardOutput> {
    let memory = encode(cfg, g, p, batch, drop)?;
    let (logits, targets) = decode(cfg, g, p, batch, memory, target, drop)?;
    Ok(ForwardOutput {
        logits,
        pivots: PivotSet::EncoderFinal {
            states: memory,
            lengths: batch.src_lengths.clone(),
        },
        targets,
    })
}
