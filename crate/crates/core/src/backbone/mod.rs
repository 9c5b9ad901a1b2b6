//! The frozen toy class-conditional diffusion denoiser.
//!
//! Images are cut into non-overlapping patches; each patch is a token. A
//! learned per-image conditioning vector (class embedding plus an MLP of a
//! sinusoidal timestep code) is added to every token, followed by pre-norm
//! transformer blocks and a linear read-out to patch space. The network
//! predicts the noise `ε` of the forward process.

mod denoiser;
mod sampler;
mod schedule;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use denoiser::{ActQuant, Adaptation, Denoiser, ForwardCtx, ForwardOut, Segment};
pub use sampler::{patchify, unpatchify, Instruments, SampleOutput};
pub use schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            patch_size: 4,
            d: 64,
            layers: 4,
            heads: 4,
            classes: 10,
            timesteps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "backbone.image_size {} is not divisible by backbone.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "backbone.d {} is not divisible by backbone.heads {}",
                self.d, self.heads
            ));
        }
        if self.d % 2 != 0 {
            return bad(format!("backbone.d {} must be even", self.d));
        }
        if self.layers == 0 || self.classes < 2 || self.timesteps < 2 {
            return bad("backbone needs ≥1 layer, ≥2 classes and ≥2 timesteps".into());
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Values per patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Attention projection that can receive a low-rank update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Q,
    K,
    V,
    O,
}

impl TargetKind {
    pub const ALL: [TargetKind; 4] = [TargetKind::Q, TargetKind::K, TargetKind::V, TargetKind::O];

    pub fn letter(self) -> char {
        match self {
            TargetKind::Q => 'Q',
            TargetKind::K => 'K',
            TargetKind::V => 'V',
            TargetKind::O => 'O',
        }
    }

    /// Parses a subset written as letters, e.g. `"QV"` or `"qkvo"`.
    pub fn parse_set(s: &str) -> Result<BTreeSet<TargetKind>> {
        let mut set = BTreeSet::new();
        for c in s.chars().filter(|c| !matches!(c, ',' | '+' | ' ')) {
            set.insert(match c.to_ascii_uppercase() {
                'Q' => TargetKind::Q,
                'K' => TargetKind::K,
                'V' => TargetKind::V,
                'O' => TargetKind::O,
                other => {
                    return Err(Error::Config(format!(
                        "unknown adaptation target `{other}` (expected Q, K, V or O)"
                    )))
                }
            });
        }
        Ok(set)
    }

    pub fn set_name(set: &BTreeSet<TargetKind>) -> String {
        set.iter().map(|k| k.letter()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Target {
    pub layer: usize,
    pub kind: TargetKind,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.w{}", self.layer, self.kind.letter().to_ascii_lowercase())
    }
}

/// Every (layer, kind) pair for `subset`, layer ascending then Q, K, V, O.
pub fn collect_adaptation_targets(config: &DenoiserConfig, subset: &BTreeSet<TargetKind>) -> Result<Vec<Target>> {
    if subset.is_empty() {
        return Err(Error::Config("composer.targets must name at least one projection".into()));
    }
    Ok((0..config.layers)
        .flat_map(|layer| subset.iter().map(move |&kind| Target { layer, kind }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_counts() {
        let cfg = DenoiserConfig::default();
        let qv = TargetKind::parse_set("QV").unwrap();
        assert_eq!(collect_adaptation_targets(&cfg, &qv).unwrap().len(), 8);
        let all = TargetKind::parse_set("QKVO").unwrap();
        let t = collect_adaptation_targets(&cfg, &all).unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(t[0], Target { layer: 0, kind: TargetKind::Q });
        assert_eq!(t[5], Target { layer: 1, kind: TargetKind::K });
        assert!(collect_adaptation_targets(&cfg, &BTreeSet::new()).is_err());
    }

    #[test]
    fn config_checks_divisibility() {
        let cfg = DenoiserConfig {
            patch_size: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DenoiserConfig::default().validate().is_ok());
    }
}
