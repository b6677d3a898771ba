//! Prompt, reference and sampled-output value types, and the
//! reasoning/outcome split.

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Input prompt. Non-empty, free of THINK_END and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(Vec<TokenId>);

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        vocab.check(&tokens)?;
        if tokens.is_empty() {
            return Err(DroError::InvalidSequence("prompt is empty".into()));
        }
        if tokens.iter().any(|&t| t == vocab.think_end() || t == vocab.eos()) {
            return Err(DroError::InvalidSequence(
                "prompt contains THINK_END or EOS".into(),
            ));
        }
        Ok(Prompt(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ground-truth outcome `y`. Non-empty, free of THINK_END.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceOutcome(Vec<TokenId>);

impl ReferenceOutcome {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        vocab.check(&tokens)?;
        if tokens.is_empty() {
            return Err(DroError::InvalidSequence("reference is empty".into()));
        }
        if tokens.contains(&vocab.think_end()) {
            return Err(DroError::InvalidSequence("reference contains THINK_END".into()));
        }
        Ok(ReferenceOutcome(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fixed stand-in for the reasoning segment when computing the masked baseline.
/// Defaults to the empty sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskedTrace(Vec<TokenId>);

impl MaskedTrace {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        vocab.check(&tokens)?;
        if tokens.contains(&vocab.think_end()) {
            return Err(DroError::InvalidSequence("masked trace contains THINK_END".into()));
        }
        Ok(MaskedTrace(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }
}

/// One sampled output split into its reasoning trace and final outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledOutput {
    pub reasoning: Vec<TokenId>,
    pub outcome: Vec<TokenId>,
    /// The sampler hit `max_len` before emitting EOS.
    pub truncated: bool,
}

/// Split a raw generation at its first THINK_END.
///
/// Tokens before the delimiter are the reasoning; tokens after it, up to
/// (excluding) the first EOS, are the outcome. Without a delimiter the whole
/// sequence, minus any EOS tail, is reasoning and the outcome is empty.
pub fn split_output(raw: &[TokenId], truncated: bool, vocab: &Vocabulary) -> SampledOutput {
    let eos = vocab.eos();
    let until_eos = |s: &[TokenId]| -> Vec<TokenId> {
        s.iter().take_while(|&&t| t != eos).copied().collect()
    };
    match raw.iter().position(|&t| t == vocab.think_end()) {
        Some(cut) => {
            let outcome = until_eos(&raw[cut + 1..])
                .into_iter()
                .filter(|&t| t != vocab.think_end())
                .collect();
            SampledOutput {
                reasoning: raw[..cut].to_vec(),
                outcome,
                truncated,
            }
        }
        None => SampledOutput {
            reasoning: until_eos(raw),
            outcome: Vec::new(),
            truncated,
        },
    }
}

/// Inverse of [`split_output`] for well-formed outputs.
pub fn join_output(reasoning: &[TokenId], outcome: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    let mut raw = Vec::with_capacity(reasoning.len() + outcome.len() + 2);
    raw.extend_from_slice(reasoning);
    raw.push(vocab.think_end());
    raw.extend_from_slice(outcome);
    raw.push(vocab.eos());
    raw
}
