use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Transformer,
    Expansion,
    DecoderOnly,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Transformer => "transformer",
            Arch::Expansion => "expansion",
            Arch::DecoderOnly => "decoder_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "transformer" => Arch::Transformer,
            "expansion" => Arch::Expansion,
            "decoder_only" => Arch::DecoderOnly,
            _ => return None,
        })
    }
}

/// Form of the target embeddings `D` that pivots reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetEmbedding {
    /// Raw table rows.
    #[default]
    Raw,
    /// Table rows times `√H`.
    Scaled,
    /// What the decoder consumes: scaled rows plus positional encodings.
    Positional,
}

impl TargetEmbedding {
    pub fn name(self) -> &'static str {
        match self {
            TargetEmbedding::Raw => "raw",
            TargetEmbedding::Scaled => "scaled",
            TargetEmbedding::Positional => "positional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "raw" => TargetEmbedding::Raw,
            "scaled" => TargetEmbedding::Scaled,
            "positional" => TargetEmbedding::Positional,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub hidden: usize,
    pub ff_size: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Static-expansion group sizes (expansion arch only).
    pub expansion_groups: Vec<usize>,
    pub max_len: usize,
    pub dropout: f64,
    /// Multiply input embeddings by `√H`.
    pub scale_embeddings: bool,
    /// Reuse the embedding table as the output projection.
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Small defaults that train in minutes on a CPU.
    pub fn desk_scale(arch: Arch) -> Self {
        ModelConfig {
            arch,
            layers: 2,
            hidden: 64,
            ff_size: 256,
            heads: 4,
            vocab: 64,
            expansion_groups: vec![4, 8],
            max_len: 64,
            dropout: 0.1,
            scale_embeddings: true,
            tie_embeddings: false,
        }
    }

    /// Base-sized configuration (6 layers, width 512, 8 heads).
    pub fn base(arch: Arch, vocab: usize) -> Self {
        ModelConfig {
            arch,
            layers: if arch == Arch::Expansion { 3 } else { 6 },
            hidden: 512,
            ff_size: 2048,
            heads: 8,
            vocab,
            expansion_groups: vec![32, 64, 128, 256, 512],
            max_len: 160,
            dropout: 0.1,
            scale_embeddings: true,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ff_size", self.ff_size),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.arch == Arch::Expansion {
            if self.expansion_groups.is_empty() {
                return Err(Error::Config("model.expansion_groups must be non-empty".into()));
            }
            if self.expansion_groups.contains(&0) {
                return Err(Error::Config("expansion group sizes must be at least 1".into()));
            }
            let mut sorted = self.expansion_groups.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.expansion_groups.len() {
                return Err(Error::Config("expansion group sizes must be distinct".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
