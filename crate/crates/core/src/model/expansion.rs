//! Encoder built from static-expansion layers.
//!
//! Each layer distributes its `N` input vectors over learned groups of `g`
//! slots (forward expansion), once through the positive and once through the
//! negative part of the routing scores, then folds the groups back to length
//! `N` with the parameter-less recombination used for equalization (backward
//! expansion) followed by a learned projection.

use alloc::format;
use alloc::vec::Vec;

use super::blocks;
use super::config::ModelConfig;
use super::{transformer, ExpansionPivot, ForwardOutput, PivotSet, TargetOptions};
use crate::autodiff::{Graph, Var};
use crate::bai::{expansion_recombine, PHI_EPS};
use crate::data::Batch;
use crate::nn::{self, Bound, Dropout};
use crate::{Error, Real, Result, Tensor};

/// Intermediate results of one expansion step.
#[derive(Clone, Debug)]
pub struct ExpansionBlock {
    /// `(g, A^g, B^g)` per group, each `B×g×H`.
    pub groups: Vec<(usize, Var, Var)>,
    /// Recombined sequence, `B×N×H`, before the output projection.
    pub recombined: Var,
}

/// Forward then backward expansion of `x: B×N×H` with the query matrices
/// `{prefix}.query.{g}` (`g×H` each). Keys at positions `>= lengths[b]`
/// receive no routing weight.
pub fn expansion_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    lengths: &[usize],
    group_sizes: &[usize],
) -> Result<ExpansionBlock> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || lengths.len() != s[0] {
        return Err(Error::shape("expansion", &s, &[lengths.len()]));
    }
    let (b, n, h) = (s[0], s[1], s[2]);
    let x2 = g.reshape(x, &[b * n, h])?;
    let inv_sqrt_h = T::one() / T::of(h as f64).sqrt();
    let eps = T::of(PHI_EPS);
    let mut groups = Vec::with_capacity(group_sizes.len());
    for &size in group_sizes {
        let key_mask = Tensor::from_fn(&[b, size, n], |i| {
            if i % n < lengths[i / (size * n)] {
                T::one()
            } else {
                T::zero()
            }
        });
        let query = p.get(&format!("{prefix}.query.{size}"))?;
        let qt = g.transpose(query)?;
        let scores = g.matmul(x2, qt)?;
        let scores = g.reshape(scores, &[b, n, size])?;
        let scores = g.permute(scores, &[0, 2, 1])?;
        let scores = g.scale(scores, inv_sqrt_h);
        let route = |g: &mut Graph<T>, r: Var| -> Result<Var> {
            let r = g.mul_const(r, &key_mask)?;
            let r = g.normalize_rows(r, eps);
            g.bmm(r, x)
        };
        let pos = g.relu(scores);
        let a = route(g, pos)?;
        let neg = g.neg_relu(scores);
        let bb = route(g, neg)?;
        groups.push((size, a, bb));
    }
    let pairs: Vec<(Var, Var)> = groups.iter().map(|&(_, a, bb)| (a, bb)).collect();
    let recombined = expansion_recombine(g, x, &pairs)?;
    Ok(ExpansionBlock { groups, recombined })
}

fn encode<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch,
    drop: &mut Dropout,
) -> Result<(Var, Vec<ExpansionPivot>)> {
    let src = &batch.src;
    let pos = blocks::sequential_positions(src.rows, src.cols);
    let mut x = blocks::input_embedding(cfg, g, p, src, &pos, drop)?;
    let mut pivots: Vec<ExpansionPivot> = Vec::new();
    for l in 0..cfg.layers {
        let pre = format!("enc.{l}");
        let blk = expansion_block(g, p, &format!("{pre}.expand"), x, &batch.src_lengths, &cfg.expansion_groups)?;
        if l == 0 {
            pivots = blk
                .groups
                .iter()
                .map(|&(size, a, b)| ExpansionPivot {
                    size,
                    a,
                    b,
                    per_layer: alloc::vec![(a, b)],
                })
                .collect();
        } else {
            for (piv, &(_, a, b)) in pivots.iter_mut().zip(&blk.groups) {
                piv.a = g.add(piv.a, a)?;
                piv.b = g.add(piv.b, b)?;
                piv.per_layer.push((a, b));
            }
        }
        let mixed = nn::linear(g, p, &format!("{pre}.expand.proj"), blk.recombined)?;
        x = blocks::residual_norm(g, p, &format!("{pre}.ln1"), x, mixed, drop)?;
        x = blocks::feed_forward_sublayer(g, p, &pre, x, drop)?;
    }
    Ok((x, pivots))
}

pub(super) fn forward<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &Batch,
    target: TargetOptions,
    drop: &mut Dropout,
) -> Result<ForwardOutput> {
    let (memory, groups) = encode(cfg, g, p, batch, drop)?;
    let (logits, targets) = transformer::decode(cfg, g, p, batch, memory, target, drop)?;
    Ok(ForwardOutput {
        logits,
        pivots: PivotSet::ExpansionIntermediate {
            groups,
            lengths: batch.src_lengths.clone(),
        },
        targets,
    })
}
