//! Causal decoder over `[prompt ∥ continuation]`.
//!
//! Slots `[0, P)` hold the padded prompt and slots `[P, P + M)` the padded
//! continuation. Each sample keeps contiguous positions: prompt token `j` sits
//! at position `j` and continuation token `k` at `p_b + k`, so padding in the
//! prompt never shifts the continuation.

use alloc::vec::Vec;

use super::blocks;
use super::config::ModelConfig;
use super::{ForwardOutput, PivotSet, TargetOptions};
use crate::data::{Batch, TokenMatrix, PAD};
use crate::nn::{AttentionMask, Bound, Dropout};
use crate::autodiff::Graph;
use crate::{Real, Result};

pub(super) fn forward<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch,
    target: TargetOptions,
    drop: &mut Dropout,
) -> Result<ForwardOutput> {
    let (bsz, pl, ml) = (batch.size(), batch.src.cols, batch.tgt_in.cols);
    let width = pl + ml;
    let mut ids = TokenMatrix {
        rows: bsz,
        cols: width,
        ids: alloc::vec![PAD; bsz * width],
    };
    let mut positions = Vec::with_capacity(bsz * width);
    let mut cont_positions = Vec::with_capacity(bsz * ml);
    for b in 0..bsz {
        let plen = batch.src_lengths[b];
        for j in 0..pl {
            ids.set(b, j, batch.src.get(b, j));
            positions.push(j);
        }
        for k in 0..ml {
            ids.set(b, pl + k, batch.tgt_in.get(b, k));
            positions.push(plen + k);
            cont_positions.push(plen + k);
        }
    }
    let valid = |b: usize, j: usize| {
        if j < pl {
            j < batch.src_lengths[b]
        } else {
            j - pl < batch.tgt_lengths[b]
        }
    };
    let mut allowed = Vec::with_capacity(bsz * width * width);
    for b in 0..bsz {
        for i in 0..width {
            for j in 0..width {
                allowed.push(j <= i && valid(b, j));
            }
        }
    }
    let mask = AttentionMask::Explicit {
        allowed,
        queries: width,
        keys: width,
    };

    let mut y = blocks::input_embedding(cfg, g, p, &ids, &positions, drop)?;
    for l in 0..cfg.layers {
        y = blocks::decoder_layer(cfg, g, p, l, y, &mask, None, drop)?;
    }
    let prompt = g.slice(y, 1, 0, pl)?;
    let cont = g.slice(y, 1, pl, width)?;
    let logits = blocks::output_logits(cfg, g, p, cont)?;
    let targets = blocks::target_embedding(cfg, g, p, &batch.tgt_out, &cont_positions, target)?;
    Ok(ForwardOutput {
        logits,
        pivots: PivotSet::PromptFinal {
            states: prompt,
            lengths: batch.src_lengths.clone(),
        },
        targets,
    })
}
