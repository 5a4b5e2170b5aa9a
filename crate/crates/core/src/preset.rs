//! Named member presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{LoraConfig, LoraTarget, ModelConfig};
use crate::tokenizer::{DEFAULT_MAX_LEN, GEMMA_MAX_LEN, LLAMA_MAX_LEN, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberPreset {
    GemmaLike,
    LlamaLike,
}

impl MemberPreset {
    pub const ALL: [MemberPreset; 2] = [MemberPreset::GemmaLike, MemberPreset::LlamaLike];

    pub fn name(self) -> &'static str {
        match self {
            MemberPreset::GemmaLike => "gemma-like",
            MemberPreset::LlamaLike => "llama-like",
        }
    }

    /// r = 8 with α chosen to keep α/r at 2 (gemma-like) or 1 (llama-like).
    pub fn lora(self) -> LoraConfig {
        let alpha = match self {
            MemberPreset::GemmaLike => 16.0,
            MemberPreset::LlamaLike => 8.0,
        };
        LoraConfig {
            rank: 8,
            alpha,
            dropout: 0.0,
            frozen_layers: 2,
            targets: vec![LoraTarget::AttnQ, LoraTarget::AttnV],
        }
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            MemberPreset::GemmaLike => 8e-5,
            MemberPreset::LlamaLike => 1.2e-4,
        }
    }

    /// Sequence length used by the full-size member.
    pub fn full_max_len(self) -> usize {
        match self {
            MemberPreset::GemmaLike => GEMMA_MAX_LEN,
            MemberPreset::LlamaLike => LLAMA_MAX_LEN,
        }
    }

    /// Desk-scale encoder dimensions.
    pub fn model(self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl fmt::Display for MemberPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MemberPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (expected gemma-like or llama-like)"))
    }
}
