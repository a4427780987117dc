//! The three sequence architectures and the pivot features they expose.
//!
//! | arch          | pivots                                      |
//! |---------------|---------------------------------------------|
//! | transformer   | final encoder states                        |
//! | expansion     | per-group forward-expansion sums over layers |
//! | decoder_only  | final states at prompt positions            |

mod blocks;
mod config;
mod decoder_only;
mod expansion;
mod transformer;

use alloc::format;
use alloc::vec::Vec;

pub use config::{Arch, ModelConfig, TargetEmbedding};
pub use expansion::{expansion_block, ExpansionBlock};

use crate::autodiff::{Graph, Var};
use crate::data::Batch;
use crate::nn::{Bound, Dropout, ParamStore};
use crate::rng::{self, streams};
use crate::{Error, Real, Result};

/// Forward-expansion results of one group size.
#[derive(Clone, Debug)]
pub struct ExpansionPivot {
    pub size: usize,
    /// `Ā^g = Σ_l A^g_l`, `B×g×H`.
    pub a: Var,
    /// `B̄^g = Σ_l B^g_l`, `B×g×H`.
    pub b: Var,
    /// Per-layer `(A^g_l, B^g_l)`, in layer order.
    pub per_layer: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PivotKind {
    EncoderFinal,
    ExpansionIntermediate,
    PromptFinal,
}

/// Pivot features of one forward pass. None of them depends on target-side
/// tokens.
#[derive(Clone, Debug)]
pub enum PivotSet {
    /// `Ē`, `B×N×H`, with source lengths.
    EncoderFinal { states: Var, lengths: Vec<usize> },
    ExpansionIntermediate { groups: Vec<ExpansionPivot>, lengths: Vec<usize> },
    /// Last-layer states over the prompt slots, `B×P×H`, with prompt lengths.
    PromptFinal { states: Var, lengths: Vec<usize> },
}

impl PivotSet {
    pub fn kind(&self) -> PivotKind {
        match self {
            PivotSet::EncoderFinal { .. } => PivotKind::EncoderFinal,
            PivotSet::ExpansionIntermediate { .. } => PivotKind::ExpansionIntermediate,
            PivotSet::PromptFinal { .. } => PivotKind::PromptFinal,
        }
    }

    /// Every pivot tensor, in a fixed order.
    pub fn vars(&self) -> Vec<Var> {
        match self {
            PivotSet::EncoderFinal { states, .. } | PivotSet::PromptFinal { states, .. } => alloc::vec![*states],
            PivotSet::ExpansionIntermediate { groups, .. } => groups.iter().flat_map(|p| [p.a, p.b]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B×M×V`.
    pub logits: Var,
    pub pivots: PivotSet,
    /// Target embeddings `D`, `B×M×H`, for the reconstruction loss.
    pub targets: Var,
}

/// How `D` is derived from the target tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TargetOptions {
    pub embedding: TargetEmbedding,
    /// Cut gradient flow from the reconstruction loss into the embedding table.
    pub detach: bool,
}

/// A configured model; parameters are passed in at every call.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Seq2Seq { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Deterministic parameter initialization. Values are drawn in `f64` and
    /// rounded, so every scalar width starts from the same point.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = rng::stream(seed, streams::INIT);
        let p = blocks::init(&self.config, &mut rng)?;
        Ok(p.cast())
    }

    /// Teacher-forced forward pass. For the decoder-only arch `src` is the
    /// prompt and the target side is the continuation.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &Batch,
        target: TargetOptions,
        drop: &mut Dropout,
    ) -> Result<ForwardOutput> {
        self.check_lengths(batch)?;
        match self.config.arch {
            Arch::Transformer => transformer::forward(&self.config, g, p, batch, target, drop),
            Arch::Expansion => expansion::forward(&self.config, g, p, batch, target, drop),
            Arch::DecoderOnly => decoder_only::forward(&self.config, g, p, batch, target, drop),
        }
    }

    /// Decoding budget for a source of `src_len` tokens: twice the source
    /// plus ten, capped so every scored prefix fits in `max_len`.
    pub fn max_decode_steps(&self, src_len: usize) -> usize {
        let cap = match self.config.arch {
            Arch::DecoderOnly => self.config.max_len.saturating_sub(src_len),
            _ => self.config.max_len,
        };
        (2 * src_len + 10).min(cap)
    }

    fn check_lengths(&self, batch: &Batch) -> Result<()> {
        let max = self.config.max_len;
        if batch.src_lengths.contains(&0) {
            let what = if self.config.arch == Arch::DecoderOnly { "prompt" } else { "source" };
            return Err(Error::Input(format!("empty {what} sequence")));
        }
        let over = match self.config.arch {
            Arch::DecoderOnly => batch
                .src_lengths
                .iter()
                .zip(&batch.tgt_lengths)
                .map(|(a, b)| a + b)
                .max()
                .unwrap_or(0),
            _ => batch.src.cols.max(batch.tgt_in.cols),
        };
        if over > max {
            return Err(Error::Input(format!("sequence length {over} exceeds max_len {max}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
