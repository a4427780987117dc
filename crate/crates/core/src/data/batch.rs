use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::vocab::{BOS, EOS, PAD};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Row-major matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenMatrix {
    /// Pads each row with `PAD` to the longest one.
    pub fn from_rows(rows: &[&[u32]]) -> Self {
        let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows.len() * cols];
        for (i, r) in rows.iter().enumerate() {
            ids[i * cols..i * cols + r.len()].copy_from_slice(r);
        }
        TokenMatrix {
            rows: rows.len(),
            cols,
            ids,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, id: u32) {
        self.ids[r * self.cols + c] = id;
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// One source/target pair of token ids, without bos/eos markers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Example {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Example { src, tgt }
    }
}

/// Padded teacher-forcing batch. `tgt_in` is `bos ∥ y`, `tgt_out` is `y ∥ eos`;
/// padding only ever appears as a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt_in: TokenMatrix,
    pub tgt_out: TokenMatrix,
    pub src_lengths: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(i) = examples.iter().position(|e| e.src.is_empty()) {
            return Err(Error::Input(alloc::format!("example {i} has an empty source")));
        }
        let srcs: Vec<&[u32]> = examples.iter().map(|e| e.src.as_slice()).collect();
        let tin: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| core::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let tout: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| e.tgt.iter().copied().chain(core::iter::once(EOS)).collect())
            .collect();
        let tin_refs: Vec<&[u32]> = tin.iter().map(Vec::as_slice).collect();
        let tout_refs: Vec<&[u32]> = tout.iter().map(Vec::as_slice).collect();
        Ok(Batch {
            src: TokenMatrix::from_rows(&srcs),
            tgt_in: TokenMatrix::from_rows(&tin_refs),
            tgt_out: TokenMatrix::from_rows(&tout_refs),
            src_lengths: srcs.iter().map(|s| s.len()).collect(),
            tgt_lengths: tin.iter().map(Vec::len).collect(),
        })
    }

    /// Source-only batch with a given decoder prefix (`bos` plus generated tokens)
    /// per row; used during decoding. `tgt_out` mirrors `tgt_in`.
    pub fn for_decoding(src: &[u32], prefix: &[u32]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Input("empty source".into()));
        }
        if prefix.is_empty() {
            return Err(Error::Input("empty decoder prefix".into()));
        }
        let tgt = TokenMatrix::from_rows(&[prefix]);
        Ok(Batch {
            src: TokenMatrix::from_rows(&[src]),
            tgt_in: tgt.clone(),
            tgt_out: tgt,
            src_lengths: vec![src.len()],
            tgt_lengths: vec![prefix.len()],
        })
    }

    pub fn size(&self) -> usize {
        self.src.rows
    }

    /// Number of non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    /// Fixed number of sequences per batch.
    Sequences(usize),
    /// Budget of padded tokens (rows × longest side) per batch.
    Tokens(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchPolicy {
    Random,
    /// Groups sources whose lengths fall in the same `width`-wide bucket.
    LengthBucketed { width: usize },
}

fn padded_len(e: &Example) -> usize {
    e.src.len().max(e.tgt.len() + 1)
}

fn chunk(order: &[usize], examples: &[Example], size: BatchSize) -> Vec<Vec<usize>> {
    match size {
        BatchSize::Sequences(n) => order.chunks(n.max(1)).map(<[usize]>::to_vec).collect(),
        BatchSize::Tokens(budget) => {
            let mut out = Vec::new();
            let mut cur: Vec<usize> = Vec::new();
            let mut longest = 0;
            for &i in order {
                let l = padded_len(&examples[i]);
                let widest = longest.max(l);
                if !cur.is_empty() && widest * (cur.len() + 1) > budget {
                    out.push(core::mem::take(&mut cur));
                    longest = 0;
                }
                longest = longest.max(l);
                cur.push(i);
            }
            if !cur.is_empty() {
                out.push(cur);
            }
            out
        }
    }
}

/// Batch composition (indices into `examples`) for one epoch. Deterministic in
/// `(seed, epoch)`.
pub fn plan_batches(
    examples: &[Example],
    size: BatchSize,
    policy: BatchPolicy,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, streams::SHUFFLE_BASE + epoch);
    match policy {
        BatchPolicy::Random => {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            chunk(&order, examples, size)
        }
        BatchPolicy::LengthBucketed { width } => {
            let width = width.max(1);
            let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, e) in examples.iter().enumerate() {
                buckets.entry(e.src.len() / width).or_default().push(i);
            }
            let mut batches = Vec::new();
            for (_, mut members) in buckets {
                members.shuffle(&mut rng);
                batches.extend(chunk(&members, examples, size));
            }
            batches.shuffle(&mut rng);
            batches
        }
    }
}

/// Iterator of padded batches over a planned epoch.
pub struct BatchIter<'a> {
    examples: &'a [Example],
    plan: alloc::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(examples: &'a [Example], size: BatchSize, policy: BatchPolicy, seed: u64, epoch: u64) -> Self {
        let plan = plan_batches(examples, size, policy, seed, epoch);
        BatchIter {
            examples,
            plan: plan.into_iter(),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.plan.next()?;
        let refs: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
        Some(Batch::from_examples(&refs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let len = 1 + (i * 7) % 11;
                Example::new((0..len as u32).map(|v| 4 + v).collect(), vec![5; 1 + i % 3])
            })
            .collect()
    }

    #[test]
    fn targets_are_shifted_views() {
        let e = Example::new(vec![5, 6], vec![7, 8, 9]);
        let b = Batch::from_examples(&[&e]).unwrap();
        assert_eq!(b.tgt_in.row(0), &[BOS, 7, 8, 9]);
        assert_eq!(b.tgt_out.row(0), &[7, 8, 9, EOS]);
        assert_eq!(b.tgt_lengths, vec![4]);
    }

    #[test]
    fn padding_is_suffix_only() {
        let a = Example::new(vec![5], vec![6]);
        let b = Example::new(vec![5, 6, 7], vec![6, 7, 8]);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        assert_eq!(batch.src.row(0), &[5, PAD, PAD]);
        assert_eq!(batch.tgt_out.row(0), &[6, EOS, PAD, PAD]);
        assert_eq!(batch.src_lengths, vec![1, 3]);
    }

    #[test]
    fn batch_size_one_visits_every_sample_once() {
        let data = corpus(37);
        let plan = plan_batches(&data, BatchSize::Sequences(1), BatchPolicy::Random, 9, 0);
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_deterministic_in_seed() {
        let data = corpus(50);
        for policy in [BatchPolicy::Random, BatchPolicy::LengthBucketed { width: 3 }] {
            let a = plan_batches(&data, BatchSize::Sequences(4), policy, 1, 2);
            let b = plan_batches(&data, BatchSize::Sequences(4), policy, 1, 2);
            let c = plan_batches(&data, BatchSize::Sequences(4), policy, 1, 3);
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn length_buckets_bound_source_spread() {
        let data = corpus(200);
        let width = 3;
        for size in [BatchSize::Sequences(8), BatchSize::Tokens(40)] {
            let plan = plan_batches(&data, size, BatchPolicy::LengthBucketed { width }, 4, 0);
            for batch in &plan {
                let lens: Vec<usize> = batch.iter().map(|&i| data[i].src.len()).collect();
                let spread = lens.iter().max().unwrap() - lens.iter().min().unwrap();
                assert!(spread < width);
            }
            assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 200);
        }
    }

    #[test]
    fn token_budget_is_respected() {
        let data = corpus(100);
        let plan = plan_batches(&data, BatchSize::Tokens(30), BatchPolicy::Random, 0, 0);
        for batch in &plan {
            let widest = batch.iter().map(|&i| padded_len(&data[i])).max().unwrap();
            assert!(batch.len() == 1 || widest * batch.len() <= 30);
        }
    }

    #[test]
    fn empty_source_is_rejected() {
        let e = Example::new(vec![], vec![4]);
        assert!(Batch::from_examples(&[&e]).is_err());
    }
}
