use alloc::format;

use crate::autodiff::{Graph, Var};
use crate::data::TokenMatrix;
use crate::nn;
use crate::{Error, Real, Result, Tensor};

/// Reconstruction error between equalized pivots `R` and target embeddings `D`
/// (both `B×M×H`): per sequence the mean over its first `lengths[b]` rows of
/// `‖r_t − d_t‖² / H`, then the mean over the batch.
pub fn bai_mse<T: Real>(g: &mut Graph<T>, r: Var, d: Var, lengths: &[usize]) -> Result<Var> {
    let s = g.shape(r).to_vec();
    if s != g.shape(d) || s.len() != 3 {
        return Err(Error::shape("bai_mse", &s, g.shape(d)));
    }
    let (b, m, h) = (s[0], s[1], s[2]);
    if lengths.len() != b {
        return Err(Error::shape("bai_mse lengths", &[lengths.len()], &[b]));
    }
    if lengths.iter().any(|&l| l > m) {
        return Err(Error::Contract(format!("target lengths {lengths:?} exceed {m} rows")));
    }
    let live = lengths.iter().filter(|&&l| l > 0).count();
    if live == 0 {
        return Err(Error::Contract("every target position is padding".into()));
    }
    let weights = Tensor::from_fn(&[b, m, h], |i| {
        let (bi, t) = (i / (m * h), (i / h) % m);
        let len = lengths[bi];
        if t < len {
            T::one() / T::of((live * len * h) as f64)
        } else {
            T::zero()
        }
    });
    let diff = g.sub(r, d)?;
    let sq = g.mul(diff, diff)?;
    let w = g.mul_const(sq, &weights)?;
    Ok(g.sum(w))
}

/// Graph handles and values of one joint-objective evaluation.
#[derive(Clone, Debug)]
pub struct BaiLossReport<T> {
    pub beta: Var,
    pub ce: Var,
    pub total: Var,
    /// Equalized pivots `R`, `B×M×H`.
    pub reconstruction: Var,
    pub lambda: T,
    pub beta_value: T,
    pub ce_value: T,
    pub total_value: T,
}

/// `total = λ·β(R, D) + CE(logits, targets)`, with `λ ∈ [0, 1]`.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &TokenMatrix,
    lengths: &[usize],
    r: Var,
    d: Var,
    lambda: T,
) -> Result<BaiLossReport<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Contract(format!("BAI weight must lie in [0, 1], got {lambda}")));
    }
    let ce = nn::cross_entropy(g, logits, targets, lengths)?;
    let beta = bai_mse(g, r, d, lengths)?;
    let weighted = g.scale(beta, lambda);
    let total = g.add(weighted, ce)?;
    Ok(BaiLossReport {
        beta,
        ce,
        total,
        reconstruction: r,
        lambda,
        beta_value: g.value(beta).item(),
        ce_value: g.value(ce).item(),
        total_value: g.value(total).item(),
    })
}
