//! The meta-generator: a small encoder transformer that turns a prompt and a
//! bank of weight-derived tokens into one low-rank update per adapted layer.

mod layout;
mod model;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use layout::{build_mask, hop_distance, reachability_holds, AttentionScheme, Role, SequenceLayout, TokenInfo};
pub use model::{BankMode, Composer, EncoderBlock};

use crate::backbone::TargetKind;
use crate::error::{Error, Result};

/// How component tokens are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    /// Projected from the frozen backbone weight of each target.
    Projected,
    /// Free learnable embeddings, independent of the backbone.
    Constant,
}

impl TokenInit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "projected" => Some(Self::Projected),
            "constant" => Some(Self::Constant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Projected => "projected",
            Self::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    Transformer,
    /// Two-layer perceptron over prompt plus flattened block tokens.
    Mlp,
}

impl GeneratorArch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transformer" => Some(Self::Transformer),
            "mlp" => Some(Self::Mlp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerConfig {
    pub r: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub m: usize,
    pub targets: BTreeSet<TargetKind>,
    pub attention: AttentionScheme,
    pub arch: GeneratorArch,
    pub token_init: TokenInit,
    /// Emit one activation scale γ per target (quantization-aware mode).
    pub gamma: bool,
    /// Fake-quantize the composer's own linear weights to this width.
    pub weight_bits: Option<u32>,
    /// Standard deviation of the A-extraction head; `None` means
    /// `1/√d_model`, `Some(0.0)` a fully zero head.
    pub a_head_std: Option<f64>,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            r: 8,
            d_model: 64,
            layers: 2,
            heads: 4,
            m: 1,
            targets: [TargetKind::Q, TargetKind::V].into_iter().collect(),
            attention: AttentionScheme::GlobalLocal,
            arch: GeneratorArch::Transformer,
            token_init: TokenInit::Projected,
            gamma: false,
            weight_bits: None,
            a_head_std: None,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("composer.r must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("composer.m must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "composer.d_model {} not divisible by composer.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("composer.targets must not be empty".into()));
        }
        if let Some(b) = self.weight_bits {
            if !(2..=32).contains(&b) {
                return Err(Error::Config(format!("composer weight bits {b} outside 2..=32")));
            }
            if !self.gamma {
                return Err(Error::Config(
                    "quantization-aware composer needs γ seed tokens in its bank".into(),
                ));
            }
        }
        Ok(())
    }
}
