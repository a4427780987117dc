use alloc::collections::BTreeMap;
use alloc::format;

use super::search::argmax;
use crate::data::TokenMatrix;
use crate::{Error, Real, Result, Tensor};

fn ngram_counts<W: Ord>(tokens: &[W], n: usize) -> BTreeMap<&[W], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per candidate: the geometric mean of the
/// clipped n-gram precisions for `n = 1..=max_n`, times the brevity penalty
/// `exp(1 − r/c)` when the candidates are shorter than the references.
/// Unsmoothed, so any zero precision gives 0.
pub fn bleu<W: Ord>(candidates: &[&[W]], references: &[&[W]], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Contract("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched as f64 / total as f64);
    }
    let c: usize = candidates.iter().map(|s| s.len()).sum();
    let r: usize = references.iter().map(|s| s.len()).sum();
    let bp = if c < r { libm::exp(1.0 - r as f64 / c as f64) } else { 1.0 };
    Ok(bp * libm::exp(log_sum / max_n as f64))
}

/// Fraction of positions `< lengths[b]` whose argmax logit (lowest id on
/// ties) equals the target; `logits` is `B×M×V`. Zero when every position is
/// padding.
pub fn token_accuracy<T: Real>(logits: &Tensor<T>, targets: &TokenMatrix, lengths: &[usize]) -> Result<f64> {
    let (hits, total) = token_hits(logits, targets, lengths)?;
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// `(correct, counted)` positions, for accumulating accuracy over batches.
pub fn token_hits<T: Real>(logits: &Tensor<T>, targets: &TokenMatrix, lengths: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != targets.rows || s[1] != targets.cols || lengths.len() != targets.rows {
        return Err(Error::shape("token_accuracy", s, &[targets.rows, targets.cols]));
    }
    let v = s[2];
    let (mut hits, mut total) = (0, 0);
    let mut row = alloc::vec![0.0; v];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(targets.cols) {
            let off = (b * targets.cols + t) * v;
            for (dst, src) in row.iter_mut().zip(&logits.data()[off..off + v]) {
                *dst = src.f64();
            }
            hits += usize::from(argmax(&row) as u32 == targets.get(b, t));
            total += 1;
        }
    }
    Ok((hits, total))
}
