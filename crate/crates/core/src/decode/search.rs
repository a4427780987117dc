use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::EOS;
use crate::{Error, Result};

/// Next-token log-probabilities given the tokens generated so far (without
/// the leading `bos`). The source, if any, is bound inside the scorer.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[u32]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_steps: usize,
    /// Length-normalization exponent: finished hypotheses rank by `logP / len^α`.
    pub alpha: f64,
}

impl BeamConfig {
    pub fn new(width: usize, max_steps: usize) -> Self {
        BeamConfig {
            width,
            max_steps,
            alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without `bos` or the closing `eos`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Closed by `eos` (as opposed to cut off at `max_steps`).
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored steps, counting the closing `eos`.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.log_prob;
        }
        self.log_prob / libm::pow(self.steps().max(1) as f64, alpha)
    }
}

fn checked(lp: Vec<f64>, prefix: &[u32]) -> Result<Vec<f64>> {
    if lp.is_empty() {
        return Err(Error::Contract("scorer returned an empty distribution".into()));
    }
    if lp.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN log-probability after prefix {prefix:?}")));
    }
    Ok(lp)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until `eos` or `max_steps` tokens.
pub fn greedy(scorer: &mut impl StepScorer, max_steps: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_steps {
        let lp = checked(scorer.log_probs(&h.tokens)?, &h.tokens)?;
        let tok = argmax(&lp);
        h.log_prob += lp[tok];
        if tok as u32 == EOS {
            h.finished = true;
            break;
        }
        h.tokens.push(tok as u32);
    }
    Ok(h)
}

/// Beam search. Each step scores every extension of every live hypothesis,
/// keeps the best `width` (ties: earlier beam, then lower token id), and
/// moves those ending in `eos` to the finished pool. Search stops when no
/// hypothesis is live, when `max_steps` is reached (live hypotheses then join
/// the pool unfinished), or, with `α = 0`, once the best finished score is at
/// least the best live one. Width 1 reproduces [`greedy`] exactly.
pub fn beam_search(scorer: &mut impl StepScorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Config(format!("length-normalization exponent must be >= 0, got {}", cfg.alpha)));
    }
    let mut alive = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_steps {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, h) in alive.iter().enumerate() {
            let lp = checked(scorer.log_probs(&h.tokens)?, &h.tokens)?;
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (h.log_prob + l, bi, tok)));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.width);
        for &(score, bi, tok) in cands.iter().take(cfg.width) {
            let mut tokens = alive[bi].tokens.clone();
            let finished = tok as u32 == EOS;
            if !finished {
                tokens.push(tok as u32);
            }
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished,
            };
            if finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if cfg.alpha == 0.0 {
            let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= alive[0].log_prob {
                alive.clear();
                break;
            }
        }
    }
    done.extend(alive);
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best.as_ref().is_none_or(|b| h.score(cfg.alpha) > b.score(cfg.alpha)) {
            best = Some(h);
        }
    }
    // Only reachable with `max_steps == 0`.
    Ok(best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }))
}
