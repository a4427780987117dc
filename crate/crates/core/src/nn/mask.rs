use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    None,
    /// Keys at positions `>= key_lengths[b]` are hidden.
    Padding { key_lengths: Vec<usize> },
    /// Query `i` sees keys `j <= i`, optionally also bounded by key lengths.
    Causal { key_lengths: Option<Vec<usize>> },
    /// Arbitrary `batch × queries × keys` visibility table.
    Explicit {
        allowed: Vec<bool>,
        queries: usize,
        keys: usize,
    },
}

impl AttentionMask {
    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Padding { key_lengths } => j < key_lengths[b],
            AttentionMask::Causal { key_lengths } => {
                j <= i && key_lengths.as_ref().is_none_or(|l| j < l[b])
            }
            AttentionMask::Explicit { allowed, queries, keys } => allowed[(b * queries + i) * keys + j],
        }
    }

    /// Additive bias (`0` or `-inf`) of shape `(batch·heads) × queries × keys`,
    /// heads varying fastest within a batch row.
    pub fn bias<T: Real>(&self, batch: usize, heads: usize, queries: usize, keys: usize) -> Result<Tensor<T>> {
        match self {
            AttentionMask::Padding { key_lengths }
            | AttentionMask::Causal {
                key_lengths: Some(key_lengths),
            } if key_lengths.len() != batch => {
                return Err(Error::shape("attention mask", &[key_lengths.len()], &[batch]));
            }
            AttentionMask::Explicit {
                allowed,
                queries: q,
                keys: k,
            } if allowed.len() != batch * q * k || *q != queries || *k != keys => {
                return Err(Error::shape("attention mask", &[allowed.len()], &[batch, queries, keys]));
            }
            _ => {}
        }
        let mut data = vec![T::zero(); batch * heads * queries * keys];
        for b in 0..batch {
            for i in 0..queries {
                let visible = (0..keys).filter(|&j| self.allows(b, i, j)).count();
                if visible == 0 {
                    return Err(Error::Contract("attention row with every key masked".into()));
                }
                for j in 0..keys {
                    if !self.allows(b, i, j) {
                        for h in 0..heads {
                            data[((b * heads + h) * queries + i) * keys + j] = T::neg_infinity();
                        }
                    }
                }
            }
        }
        Tensor::new(&[batch * heads, queries, keys], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_forbids_future() {
        let m = AttentionMask::Causal { key_lengths: None };
        assert!(m.allows(0, 2, 2) && m.allows(0, 2, 0));
        assert!(!m.allows(0, 2, 3));
    }

    #[test]
    fn padding_forbids_suffix() {
        let m = AttentionMask::Padding { key_lengths: vec![2, 3] };
        assert!(!m.allows(0, 0, 2));
        assert!(m.allows(1, 0, 2));
        let bias = m.bias::<f64>(2, 1, 1, 3).unwrap();
        assert_eq!(bias.data()[2], f64::NEG_INFINITY);
        assert_eq!(bias.data()[5], 0.0);
    }

    #[test]
    fn fully_masked_rows_are_rejected() {
        let m = AttentionMask::Padding { key_lengths: vec![0] };
        assert!(m.bias::<f64>(1, 1, 2, 2).is_err());
    }
}
