//! Token arrangement and attention visibility for the meta-generator.
//!
//! A sequence is a prompt block (block 0, `m` tokens) followed by one
//! component block per adaptation target: `r` A-tokens, `r` B-tokens and, in
//! quantization-aware mode, one γ-token.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numerics::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    A,
    B,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub block: usize,
    pub offset: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub m: usize,
    pub r: usize,
    pub blocks: usize,
    pub gamma: bool,
    tokens: Vec<TokenInfo>,
}

impl SequenceLayout {
    /// `blocks` component blocks after an `m`-token prompt block.
    pub fn new(m: usize, r: usize, blocks: usize, gamma: bool) -> Self {
        let mut tokens: Vec<TokenInfo> = (0..m)
            .map(|offset| TokenInfo {
                block: 0,
                offset,
                role: Role::Prompt,
            })
            .collect();
        for b in 1..=blocks {
            for offset in 0..2 * r + usize::from(gamma) {
                let role = if offset < r {
                    Role::A
                } else if offset < 2 * r {
                    Role::B
                } else {
                    Role::Gamma
                };
                tokens.push(TokenInfo {
                    block: b,
                    offset,
                    role,
                });
            }
        }
        SequenceLayout {
            m,
            r,
            blocks,
            gamma,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn block_len(&self) -> usize {
        2 * self.r + usize::from(self.gamma)
    }

    /// Index of the first token of component block `b` (1-based).
    pub fn block_start(&self, b: usize) -> usize {
        self.m + (b - 1) * self.block_len()
    }
}

/// How component blocks see each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScheme {
    /// Prompt-to-prompt, component-to-prompt, within-block, and
    /// first-token-to-first-token across blocks.
    GlobalLocal,
    /// As `GlobalLocal`, but first tokens see every component token.
    FirstToAll,
    /// Every token sees every token.
    Standard,
}

impl AttentionScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global_local" => Some(Self::GlobalLocal),
            "first_to_all" => Some(Self::FirstToAll),
            "standard" => Some(Self::Standard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GlobalLocal => "global_local",
            Self::FirstToAll => "first_to_all",
            Self::Standard => "standard",
        }
    }
}

/// `mask[q][k]` is true when token `q` may attend to token `k`.
pub fn build_mask(layout: &SequenceLayout, scheme: AttentionScheme) -> Mask {
    let toks = layout.tokens();
    let n = toks.len();
    Mask::from_fn(n, n, |q, k| {
        let (tq, tk) = (toks[q], toks[k]);
        let q_prompt = tq.role == Role::Prompt;
        let k_prompt = tk.role == Role::Prompt;
        match scheme {
            AttentionScheme::Standard => true,
            _ if q_prompt => k_prompt,
            _ if k_prompt => true,
            _ if tq.block == tk.block => true,
            AttentionScheme::GlobalLocal => tq.offset == 0 && tk.offset == 0,
            AttentionScheme::FirstToAll => tq.offset == 0,
        }
    })
}

/// Information-flow distance in hops: `k → q` is an edge when `q` attends to
/// `k`. Returns `None` for unreachable pairs.
pub fn hop_distance(mask: &Mask, from: usize, to: usize) -> Option<usize> {
    let n = mask.rows();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::from([from]);
    dist[from] = 0;
    while let Some(k) = queue.pop_front() {
        if k == to {
            return Some(dist[k]);
        }
        for q in 0..n {
            if dist[q] == usize::MAX && mask.get(q, k) {
                dist[q] = dist[k] + 1;
                queue.push_back(q);
            }
        }
    }
    None
}

/// Checks the two reachability properties of the global-local scheme:
/// every component token sees every prompt token directly, and every token of
/// any block reaches the first token of every other block within two hops.
pub fn reachability_holds(layout: &SequenceLayout, mask: &Mask) -> bool {
    let toks = layout.tokens();
    let prompts: Vec<usize> = (0..layout.m).collect();
    for (q, t) in toks.iter().enumerate() {
        if t.role != Role::Prompt && !prompts.iter().all(|&p| mask.get(q, p)) {
            return false;
        }
    }
    for x in 1..=layout.blocks {
        let hub = layout.block_start(x);
        for (k, t) in toks.iter().enumerate() {
            if t.role == Role::Prompt || t.block == x {
                continue;
            }
            match hop_distance(mask, k, hub) {
                Some(h) if h <= 2 => {}
                _ => return false,
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_lengths() {
        let l = SequenceLayout::new(1, 8, 8, false);
        assert_eq!(l.len(), 1 + 8 * 16);
        let q = SequenceLayout::new(1, 8, 8, true);
        assert_eq!(q.len() - l.len(), 8);
        assert_eq!(q.tokens()[q.block_start(2)].offset, 0);
        assert_eq!(q.tokens()[q.block_start(2) + 16].role, Role::Gamma);
    }

    #[test]
    fn prompt_rows_see_only_prompts() {
        let l = SequenceLayout::new(2, 2, 2, false);
        let m = build_mask(&l, AttentionScheme::GlobalLocal);
        for q in 0..2 {
            for k in 0..l.len() {
                assert_eq!(m.get(q, k), k < 2);
            }
        }
    }

    #[test]
    fn non_first_tokens_stay_local() {
        let l = SequenceLayout::new(1, 3, 3, false);
        let m = build_mask(&l, AttentionScheme::GlobalLocal);
        for (q, tq) in l.tokens().iter().enumerate() {
            if tq.role == Role::Prompt || tq.offset == 0 {
                continue;
            }
            for (k, tk) in l.tokens().iter().enumerate() {
                if tk.role != Role::Prompt && tk.block != tq.block {
                    assert!(!m.get(q, k));
                }
            }
        }
        assert!(reachability_holds(&l, &m));
    }

    #[test]
    fn standard_scheme_is_dense() {
        let l = SequenceLayout::new(1, 2, 2, false);
        assert_eq!(build_mask(&l, AttentionScheme::Standard).count_true(), l.len() * l.len());
    }
}
