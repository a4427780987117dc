use alloc::format;
use alloc::vec::Vec;

use super::equalize;
use crate::autodiff::{Graph, Var};
use crate::model::{Arch, PivotKind, PivotSet};
use crate::{Error, Real, Result};

/// Which equalizer a pivot set feeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PivotRoute {
    /// Attention equalization over `B×N×H` states (encoder output or prompt states).
    Attention { states: Var, lengths: Vec<usize> },
    /// Backward-expansion equalization over per-group `(Ā^g, B̄^g)`.
    Expansion { groups: Vec<(Var, Var)> },
}

fn expected_kind(arch: Arch) -> PivotKind {
    match arch {
        Arch::Transformer => PivotKind::EncoderFinal,
        Arch::Expansion => PivotKind::ExpansionIntermediate,
        Arch::DecoderOnly => PivotKind::PromptFinal,
    }
}

/// Route the pivots of an `arch` forward pass to their equalizer.
pub fn select_pivots(arch: Arch, pivots: &PivotSet) -> Result<PivotRoute> {
    if pivots.kind() != expected_kind(arch) {
        return Err(Error::Contract(format!(
            "{:?} pivots cannot come from the {} architecture",
            pivots.kind(),
            arch.name()
        )));
    }
    Ok(match pivots {
        PivotSet::EncoderFinal { states, lengths } | PivotSet::PromptFinal { states, lengths } => PivotRoute::Attention {
            states: *states,
            lengths: lengths.clone(),
        },
        PivotSet::ExpansionIntermediate { groups, .. } => PivotRoute::Expansion {
            groups: groups.iter().map(|p| (p.a, p.b)).collect(),
        },
    })
}

/// Equalize routed pivots to the length of `d: B×M×H`.
pub fn reconstruct<T: Real>(g: &mut Graph<T>, route: &PivotRoute, d: Var, tgt_lengths: &[usize]) -> Result<Var> {
    match route {
        PivotRoute::Attention { states, lengths } => equalize::equalize_transformer(g, *states, lengths, d, tgt_lengths),
        PivotRoute::Expansion { groups } => equalize::equalize_expansion(g, groups, d, tgt_lengths),
    }
}
