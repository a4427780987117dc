use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::batch::Example;
use super::tasks::Dataset;
use super::vocab::Vocabulary;
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Tokenized pairs of a `source<TAB>target` corpus with the vocabulary shared
/// by both sides (tokens numbered by first appearance, source before target).
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub vocab: Vocabulary,
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    /// Pairs removed because a side exceeded the length limit.
    pub dropped: usize,
}

/// Parses one pair per line. Blank lines are skipped; pairs whose source is
/// longer than `max_len` tokens, or whose target plus `eos` is, are dropped.
pub fn parse_parallel(text: &str, max_len: usize) -> Result<ParallelCorpus> {
    let mut vocab = Vocabulary::new();
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(src), Some(tgt), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Input(format!(
                "line {lineno}: expected exactly one tab separating source and target"
            )));
        };
        let src: Vec<String> = src.split_whitespace().map(ToString::to_string).collect();
        let tgt: Vec<String> = tgt.split_whitespace().map(ToString::to_string).collect();
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Input(format!("line {lineno}: empty source or target")));
        }
        if src.len() > max_len || tgt.len() + 1 > max_len {
            dropped += 1;
            continue;
        }
        for t in src.iter().chain(&tgt) {
            vocab.add(t);
        }
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus {
        vocab,
        pairs,
        dropped,
    })
}

/// Splits a corpus into train and validation sets: a seeded shuffle, the first
/// `valid_count` pairs go to validation.
pub fn dataset_from_pairs(corpus: &ParallelCorpus, valid_count: usize, vocab_limit: usize, seed: u64) -> Result<Dataset> {
    if corpus.vocab.len() > vocab_limit {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} tokens, model vocabulary holds {vocab_limit}",
            corpus.vocab.len()
        )));
    }
    if valid_count >= corpus.pairs.len() {
        return Err(Error::Config(format!(
            "validation split of {valid_count} leaves no training pairs out of {}",
            corpus.pairs.len()
        )));
    }
    let encode = |toks: &[String]| toks.iter().map(|t| corpus.vocab.id(t)).collect::<Vec<u32>>();
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, streams::DATA));
    let mut examples: Vec<Example> = order
        .iter()
        .map(|&i| Example::new(encode(&corpus.pairs[i].0), encode(&corpus.pairs[i].1)))
        .collect();
    let train = examples.split_off(valid_count);
    Ok(Dataset {
        vocab: corpus.vocab.clone(),
        train,
        valid: examples,
    })
}
