//! Tabular softmax policy.
//!
//! The next-token distribution is a softmax over one row of a dense logit
//! table. The row is selected by a two-token context key plus a zone bucket:
//!
//! * the previous token (the last prompt token when nothing has been
//!   generated yet),
//! * the position-aligned token of the preceding segment: while reasoning,
//!   the prompt token at the same offset; while writing the outcome, the
//!   reasoning token at the same offset; `PAD` past the end of that segment,
//! * the zone: reasoning (before the first THINK_END) or outcome (after it).
//!
//! The model is small enough that every parameter can be finite-differenced,
//! yet its outcome certainty depends on the sampled reasoning at every
//! position, which is what the reflection reward needs.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::sequence::Prompt;
use crate::vocab::{TokenId, Vocabulary};

/// Longest prompt + generation the policy accepts.
pub const MAX_CONTEXT: usize = 512;

/// Number of zone buckets (reasoning, outcome).
pub const ZONES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Old,
    Reference,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Reasoning = 0,
    Outcome = 1,
}

/// Immutable parameter snapshot.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    vocab: Vocabulary,
    params: Arc<Vec<f64>>,
    role: Role,
    version: u64,
}

impl PartialEq for PolicySnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.params == other.params && self.version == other.version
    }
}

/// Dense gradient with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &Gradient) -> Result<()> {
        if other.0.len() != self.0.len() {
            return Err(DroError::DimensionMismatch {
                what: "gradient",
                expected: self.0.len(),
                got: other.0.len(),
            });
        }
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Sampling controls for [`PolicySnapshot::sample_output`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 0.95,
            max_len: 64,
        }
    }
}

/// Raw generation plus whether it was cut off at `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub truncated: bool,
}

pub fn init_policy(vocab: &Vocabulary, seed: u64) -> PolicySnapshot {
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-0.01, 0.01);
    let params = (0..ZONES * v * v * v).map(|_| dist.sample(&mut rng)).collect();
    PolicySnapshot {
        vocab: vocab.clone(),
        params: Arc::new(params),
        role: Role::Reference,
        version: 0,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

impl PolicySnapshot {
    /// Build a snapshot from an explicit parameter vector.
    pub fn from_params(vocab: &Vocabulary, params: Vec<f64>, role: Role, version: u64) -> Result<Self> {
        let expected = Self::param_count(vocab);
        if params.len() != expected {
            return Err(DroError::DimensionMismatch {
                what: "policy parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DroError::OutOfRange("non-finite policy parameter".into()));
        }
        Ok(PolicySnapshot {
            vocab: vocab.clone(),
            params: Arc::new(params),
            role,
            version,
        })
    }

    pub fn param_count(vocab: &Vocabulary) -> usize {
        let v = vocab.len();
        ZONES * v * v * v
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Same parameters under another role tag.
    pub fn with_role(&self, role: Role) -> Self {
        PolicySnapshot {
            role,
            ..self.clone()
        }
    }

    /// True when both snapshots share the same parameter allocation or values.
    pub fn same_params(&self, other: &PolicySnapshot) -> bool {
        Arc::ptr_eq(&self.params, &other.params) || self.params == other.params
    }

    /// Index of the first logit of the row for `(zone, prev, aligned)`.
    pub fn row_offset(&self, zone: Zone, prev: TokenId, aligned: TokenId) -> usize {
        let v = self.vocab.len();
        (((zone as usize) * v + prev.index()) * v + aligned.index()) * v
    }

    /// Locate the logit row that predicts the token following `generated`.
    pub fn row_for(&self, prompt: &[TokenId], generated: &[TokenId]) -> usize {
        let vocab = &self.vocab;
        let prev = generated
            .last()
            .or_else(|| prompt.last())
            .copied()
            .unwrap_or(vocab.bos());
        let (zone, aligned) = match generated.iter().position(|&t| t == vocab.think_end()) {
            None => (
                Zone::Reasoning,
                prompt.get(generated.len()).copied().unwrap_or(vocab.pad()),
            ),
            Some(cut) => {
                let offset = generated.len() - cut - 1;
                (
                    Zone::Outcome,
                    generated[..cut].get(offset).copied().unwrap_or(vocab.pad()),
                )
            }
        };
        self.row_offset(zone, prev, aligned)
    }

    fn row(&self, offset: usize) -> &[f64] {
        &self.params[offset..offset + self.vocab.len()]
    }

    /// Raw logits for the next token.
    pub fn logits(&self, prompt: &[TokenId], generated: &[TokenId]) -> &[f64] {
        self.row(self.row_for(prompt, generated))
    }

    /// Softmax over the vocabulary for the token following `generated`.
    pub fn next_token_distribution(&self, prompt: &[TokenId], generated: &[TokenId]) -> Vec<f64> {
        let mut row = self.logits(prompt, generated).to_vec();
        softmax_in_place(&mut row);
        row
    }

    /// Log-probability of each token of `raw` given everything before it.
    pub fn sequence_logps(&self, prompt: &[TokenId], raw: &[TokenId]) -> Vec<f64> {
        (0..raw.len())
            .map(|t| log_softmax_at(self.logits(prompt, &raw[..t]), raw[t].index()))
            .collect()
    }

    /// Autoregressive nucleus sampling until EOS or `max_len` tokens.
    pub fn sample_output<R: Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
        rng: &mut R,
    ) -> Rollout {
        let eos = self.vocab.eos();
        let mut tokens = Vec::with_capacity(params.max_len);
        while tokens.len() < params.max_len {
            let logits = self.logits(prompt.tokens(), &tokens);
            let next = nucleus_sample(logits, params.temperature, params.top_p, rng);
            tokens.push(next);
            if next == eos {
                return Rollout {
                    tokens,
                    truncated: false,
                };
            }
        }
        Rollout {
            tokens,
            truncated: true,
        }
    }

    /// Argmax decoding (ties to the lowest id) until EOS or `max_len`.
    pub fn greedy_output(&self, prompt: &Prompt, max_len: usize) -> Rollout {
        let eos = self.vocab.eos();
        let mut tokens = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let logits = self.logits(prompt.tokens(), &tokens);
            let next = argmax(logits);
            tokens.push(next);
            if next == eos {
                return Rollout {
                    tokens,
                    truncated: false,
                };
            }
        }
        Rollout {
            tokens,
            truncated: true,
        }
    }

    /// Gradient ascent step; returns a new snapshot with `version + 1`.
    pub fn apply_gradient(&self, gradient: &Gradient, learning_rate: f64) -> Result<Self> {
        if gradient.0.len() != self.params.len() {
            return Err(DroError::DimensionMismatch {
                what: "gradient",
                expected: self.params.len(),
                got: gradient.0.len(),
            });
        }
        let params: Vec<f64> = self
            .params
            .iter()
            .zip(&gradient.0)
            .map(|(p, g)| p + learning_rate * g)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DroError::OutOfRange("update produced non-finite parameters".into()));
        }
        Ok(PolicySnapshot {
            vocab: self.vocab.clone(),
            params: Arc::new(params),
            role: self.role,
            version: self.version + 1,
        })
    }

    /// Add a copying prior: reasoning copies the aligned prompt token and
    /// outcome copies the aligned reasoning token; both close their segment
    /// once the aligned segment runs out. Tokens in `opaque` are not copied
    /// by the reasoning zone, so rows keyed on them keep their original logits.
    pub fn with_copy_prior(&self, strength: f64, opaque: &[TokenId]) -> Self {
        let vocab = &self.vocab;
        let v = vocab.len();
        let mut params = self.params.as_ref().clone();
        for prev in 0..v {
            for aligned in 0..v {
                let aligned_id = TokenId::from(aligned);
                let prev_id = TokenId::from(prev);
                let r = self.row_offset(Zone::Reasoning, prev_id, aligned_id);
                if aligned_id == vocab.pad() {
                    params[r + vocab.think_end().index()] += strength;
                } else if !vocab.is_reserved(aligned_id) && !opaque.contains(&aligned_id) {
                    params[r + aligned] += strength;
                }
                let o = self.row_offset(Zone::Outcome, prev_id, aligned_id);
                if aligned_id == vocab.pad() {
                    params[o + vocab.eos().index()] += strength;
                } else if !vocab.is_reserved(aligned_id) {
                    params[o + aligned] += strength;
                }
            }
        }
        PolicySnapshot {
            vocab: vocab.clone(),
            params: Arc::new(params),
            role: self.role,
            version: self.version,
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    TokenId::from(best)
}

/// Temperature-scaled top-p draw from one logit row.
///
/// The nucleus is the shortest prefix of tokens sorted by descending
/// probability (ascending id on ties) whose mass reaches `top_p`.
pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> TokenId {
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut probs);
    let nucleus = nucleus(&probs, top_p);
    let mass: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let u = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &nucleus {
        acc += probs[i];
        if u < acc {
            return TokenId::from(i);
        }
    }
    TokenId::from(*nucleus.last().expect("nucleus is never empty"))
}

/// Indices of the top-p nucleus in sampling order.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut keep = order.len();
    for (n, &i) in order.iter().enumerate() {
        acc += probs[i];
        if acc >= top_p {
            keep = n + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}
