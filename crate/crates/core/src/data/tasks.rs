use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use super::batch::Example;
use super::vocab::{Vocabulary, RESERVED};
use crate::rng::{self, streams, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    /// `"12 + 30"` → `"42"`, one token per digit.
    ArithTranslate,
    /// Tab-separated corpus read from a file by the caller.
    ParallelFile,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::ArithTranslate => "arith_translate",
            TaskKind::ParallelFile => "parallel_file",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "sort" => TaskKind::Sort,
            "arith_translate" => TaskKind::ArithTranslate,
            "parallel_file" => TaskKind::ParallelFile,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary size, reserved ids included.
    pub vocab_size: usize,
    /// Inclusive source-length range.
    pub min_len: usize,
    pub max_len: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub seed: u64,
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

const ARITH_ALPHABET: [&str; 11] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+"];

fn symbol_vocab(size: usize) -> Vocabulary {
    let names: Vec<String> = (0..size - RESERVED as usize).map(|i| format!("s{i}")).collect();
    Vocabulary::from_tokens(names.iter().map(String::as_str))
}

fn digits(mut n: u64) -> Vec<u32> {
    let mut out = Vec::new();
    loop {
        out.push((n % 10) as u32);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    out
}

fn random_number(rng: &mut Rng, ndigits: usize) -> u64 {
    if ndigits == 1 {
        return rng.random_range(0..10);
    }
    let lo = 10u64.pow(ndigits as u32 - 1);
    rng.random_range(lo..lo * 10)
}

fn sample(spec: &TaskSpec, rng: &mut Rng) -> Example {
    match spec.kind {
        TaskKind::ArithTranslate => {
            let lo = spec.min_len.max(3);
            let total = rng.random_range(lo..=spec.max_len);
            let da = rng.random_range(1..=total - 2);
            let db = total - 1 - da;
            let (a, b) = (random_number(rng, da), random_number(rng, db));
            // ids: digits occupy RESERVED..RESERVED+10, '+' is RESERVED+10
            let mut src: Vec<u32> = digits(a).into_iter().map(|d| d + RESERVED).collect();
            src.push(RESERVED + 10);
            src.extend(digits(b).into_iter().map(|d| d + RESERVED));
            let tgt = digits(a + b).into_iter().map(|d| d + RESERVED).collect();
            Example::new(src, tgt)
        }
        kind => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let hi = spec.vocab_size as u32;
            let src: Vec<u32> = (0..len).map(|_| rng.random_range(RESERVED..hi)).collect();
            let tgt = match kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
                _ => {
                    let mut s = src.clone();
                    s.sort_unstable();
                    s
                }
            };
            Example::new(src, tgt)
        }
    }
}

/// Builds the train and validation splits of a synthetic task. Every source
/// sequence appears at most once across both splits.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "task length range {}..={} is empty",
            spec.min_len, spec.max_len
        )));
    }
    let vocab = match spec.kind {
        TaskKind::ParallelFile => {
            return Err(Error::Config(
                "parallel_file tasks are built from corpus text, not generated".into(),
            ))
        }
        TaskKind::ArithTranslate => {
            let needed = RESERVED as usize + ARITH_ALPHABET.len();
            if spec.vocab_size < needed {
                return Err(Error::Config(format!(
                    "arith_translate needs a vocabulary of at least {needed}, got {}",
                    spec.vocab_size
                )));
            }
            if spec.max_len < 3 {
                return Err(Error::Config("arith_translate needs max_len >= 3".into()));
            }
            if spec.max_len > 20 {
                return Err(Error::Config("arith_translate supports max_len <= 20".into()));
            }
            Vocabulary::from_tokens(ARITH_ALPHABET)
        }
        _ => {
            if spec.vocab_size <= RESERVED as usize {
                return Err(Error::Config(format!(
                    "vocabulary of {} leaves no room for task symbols",
                    spec.vocab_size
                )));
            }
            symbol_vocab(spec.vocab_size)
        }
    };

    let wanted = spec.train_count + spec.valid_count;
    let mut rng = rng::stream(spec.seed, streams::DATA);
    let mut seen = BTreeSet::new();
    let mut all = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    let cap = 100 * wanted + 1000;
    while all.len() < wanted {
        attempts += 1;
        if attempts > cap {
            return Err(Error::Config(format!(
                "task space too small: {} distinct samples found, {wanted} requested",
                all.len()
            )));
        }
        let ex = sample(spec, &mut rng);
        if seen.insert(ex.src.clone()) {
            all.push(ex);
        }
    }
    let valid = all.split_off(spec.train_count);
    Ok(Dataset {
        vocab,
        train: all,
        valid,
    })
}
