//! Length equalization: map pivot features onto the target length `M`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::nn::AttentionMask;
use crate::{Error, Real, Result, Tensor};

/// Stabilizer of the row normalization `φ(x)_i = x_i / (Σ_j x_j + ε)`.
pub const PHI_EPS: f64 = 1e-9;

/// `B×M×H` mask that keeps rows `< lengths[b]` and zeroes the rest.
pub fn row_mask<T: Real>(b: usize, m: usize, h: usize, lengths: &[usize]) -> Result<Tensor<T>> {
    if lengths.len() != b {
        return Err(Error::shape("row mask", &[lengths.len()], &[b]));
    }
    Ok(Tensor::from_fn(&[b, m, h], |i| {
        let (bi, t) = (i / (m * h), (i / h) % m);
        if t < lengths[bi] {
            T::one()
        } else {
            T::zero()
        }
    }))
}

fn dims3<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<[usize; 3]> {
    match *g.shape(v) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::Contract(format!("{what} must be rank 3, got shape {s:?}"))),
    }
}

/// Attention-based equalization:
/// `R = softmax(D Ēᵀ / √H) Ē`, with source columns `>= src_lengths[b]`
/// hidden and target rows `>= tgt_lengths[b]` zeroed.
pub fn equalize_transformer<T: Real>(
    g: &mut Graph<T>,
    pivots: Var,
    src_lengths: &[usize],
    d: Var,
    tgt_lengths: &[usize],
) -> Result<Var> {
    let [b, n, h] = dims3(g, pivots, "pivots")?;
    let [bd, m, hd] = dims3(g, d, "target embeddings")?;
    if b != bd || h != hd {
        return Err(Error::shape("equalize", &[b, n, h], &[bd, m, hd]));
    }
    if src_lengths.len() != b {
        return Err(Error::shape("equalize source lengths", &[src_lengths.len()], &[b]));
    }
    if let Some(i) = src_lengths.iter().position(|&l| l == 0) {
        return Err(Error::Contract(format!("sequence {i} has no unmasked pivot")));
    }
    let s = g.bmm_nt(d, pivots)?;
    let s = g.scale(s, T::one() / T::of(h as f64).sqrt());
    let mask = AttentionMask::Padding {
        key_lengths: src_lengths.to_vec(),
    };
    let s = g.add_const(s, &mask.bias(b, 1, m, n)?)?;
    let att = g.softmax(s)?;
    let r = g.bmm(att, pivots)?;
    g.mul_const(r, &row_mask(b, m, h, tgt_lengths)?)
}

/// Parameter-less backward expansion of `(A^g, B^g)` groups against
/// `queries: B×M×H`:
///
/// ```text
/// C^g  = (A^g + B^g) / 2
/// R1^g = φ(ReLU(Q C^gᵀ / √H)),  R2^g = φ(ReLU(−Q C^gᵀ / √H))
/// R    = (R1 Â + R2 B̂) / (2|G|)
/// ```
///
/// where `R1`/`R2` concatenate the groups along columns and `Â`/`B̂` along rows.
pub fn expansion_recombine<T: Real>(g: &mut Graph<T>, queries: Var, groups: &[(Var, Var)]) -> Result<Var> {
    let [b, _, h] = dims3(g, queries, "queries")?;
    if groups.is_empty() {
        return Err(Error::Contract("expansion equalization needs at least one group".into()));
    }
    let eps = T::of(PHI_EPS);
    let inv_sqrt_h = T::one() / T::of(h as f64).sqrt();
    let mut r1 = Vec::with_capacity(groups.len());
    let mut r2 = Vec::with_capacity(groups.len());
    let mut a_hat = Vec::with_capacity(groups.len());
    let mut b_hat = Vec::with_capacity(groups.len());
    for (k, &(a, bb)) in groups.iter().enumerate() {
        let sa = dims3(g, a, "expansion group")?;
        let sb = dims3(g, bb, "expansion group")?;
        if sa != sb || sa[0] != b || sa[2] != h {
            return Err(Error::Contract(format!(
                "expansion group {k} has shapes {sa:?} / {sb:?}, expected batch {b} and hidden {h}"
            )));
        }
        let c = g.add(a, bb)?;
        let c = g.scale(c, T::of(0.5));
        let s = g.bmm_nt(queries, c)?;
        let s = g.scale(s, inv_sqrt_h);
        let pos = g.relu(s);
        let neg = g.neg_relu(s);
        r1.push(g.normalize_rows(pos, eps));
        r2.push(g.normalize_rows(neg, eps));
        a_hat.push(a);
        b_hat.push(bb);
    }
    let r1 = g.concat(&r1, 2)?;
    let r2 = g.concat(&r2, 2)?;
    let a_hat = g.concat(&a_hat, 1)?;
    let b_hat = g.concat(&b_hat, 1)?;
    let x = g.bmm(r1, a_hat)?;
    let y = g.bmm(r2, b_hat)?;
    let sum = g.add(x, y)?;
    Ok(g.scale(sum, T::one() / T::of(2.0 * groups.len() as f64)))
}

/// Expansion-based equalization of `(Ā^g, B̄^g)` pivots against target
/// embeddings `D`; target rows `>= tgt_lengths[b]` are zeroed.
pub fn equalize_expansion<T: Real>(g: &mut Graph<T>, groups: &[(Var, Var)], d: Var, tgt_lengths: &[usize]) -> Result<Var> {
    let [b, m, h] = dims3(g, d, "target embeddings")?;
    let r = expansion_recombine(g, d, groups)?;
    g.mul_const(r, &row_mask(b, m, h, tgt_lengths)?)
}
