//! Teacher-forced scoring of a reference outcome under reasoning prefixes.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::policy::{log_softmax_at, softmax_in_place, PolicySnapshot, MAX_CONTEXT};
use crate::sequence::{MaskedTrace, Prompt, ReferenceOutcome};
use crate::vocab::TokenId;

/// Per-token log-probabilities (nats) and 1-based ranks of the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyRow {
    pub logp: Vec<f64>,
    pub rank: Vec<u32>,
}

impl CertaintyRow {
    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }
}

/// One [`CertaintyRow`] per reasoning trace, all of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyMatrix {
    rows: Vec<CertaintyRow>,
    reference_len: usize,
}

impl CertaintyMatrix {
    pub fn new(rows: Vec<CertaintyRow>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| DroError::InvalidSequence("certainty matrix needs at least one row".into()))?;
        let reference_len = first.len();
        for row in &rows {
            if row.logp.len() != reference_len || row.rank.len() != reference_len {
                return Err(DroError::DimensionMismatch {
                    what: "certainty row",
                    expected: reference_len,
                    got: row.logp.len(),
                });
            }
        }
        Ok(CertaintyMatrix { rows, reference_len })
    }

    /// Matrix from bare log-probabilities; ranks are set to 1.
    pub fn from_logp(logp: Vec<Vec<f64>>) -> Result<Self> {
        CertaintyMatrix::new(
            logp.into_iter()
                .map(|l| CertaintyRow {
                    rank: vec![1; l.len()],
                    logp: l,
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[CertaintyRow] {
        &self.rows
    }

    pub fn group_size(&self) -> usize {
        self.rows.len()
    }

    pub fn reference_len(&self) -> usize {
        self.reference_len
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r.logp[j])
    }
}

fn scoring_context(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    reasoning: &[TokenId],
    reference: &ReferenceOutcome,
) -> Result<Vec<TokenId>> {
    let vocab = policy.vocab();
    vocab.check(reasoning)?;
    vocab.check(reference.tokens())?;
    if reasoning.contains(&vocab.think_end()) {
        return Err(DroError::InvalidSequence("reasoning contains THINK_END".into()));
    }
    let len = prompt.len() + reasoning.len() + 1 + reference.len();
    if len > MAX_CONTEXT {
        return Err(DroError::ContextTooLong { len, max: MAX_CONTEXT });
    }
    let mut generated = Vec::with_capacity(reasoning.len() + 1 + reference.len());
    generated.extend_from_slice(reasoning);
    generated.push(vocab.think_end());
    generated.extend_from_slice(reference.tokens());
    Ok(generated)
}

/// 1-based rank of `target` in `probs`, sorted descending with ties by ascending id.
pub fn token_rank(probs: &[f64], target: usize) -> u32 {
    let p = probs[target];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < target))
        .count();
    ahead as u32 + 1
}

/// Teacher-force `reference` after `(prompt, reasoning, THINK_END)`.
pub fn score_reference(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    reasoning: &[TokenId],
    reference: &ReferenceOutcome,
) -> Result<CertaintyRow> {
    let generated = scoring_context(policy, prompt, reasoning, reference)?;
    let start = reasoning.len() + 1;
    let mut logp = Vec::with_capacity(reference.len());
    let mut rank = Vec::with_capacity(reference.len());
    for (j, &y) in reference.tokens().iter().enumerate() {
        let logits = policy.logits(prompt.tokens(), &generated[..start + j]);
        logp.push(log_softmax_at(logits, y.index()));
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        rank.push(token_rank(&probs, y.index()));
    }
    Ok(CertaintyRow { logp, rank })
}

/// The full next-token distribution at every reference position. Debug aid
/// for checking that scored log-probabilities come from proper distributions.
pub fn reference_distributions(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    reasoning: &[TokenId],
    reference: &ReferenceOutcome,
) -> Result<Vec<Vec<f64>>> {
    let generated = scoring_context(policy, prompt, reasoning, reference)?;
    let start = reasoning.len() + 1;
    Ok((0..reference.len())
        .map(|j| policy.next_token_distribution(prompt.tokens(), &generated[..start + j]))
        .collect())
}

pub fn build_certainty_matrix<T: AsRef<[TokenId]>>(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    traces: &[T],
    reference: &ReferenceOutcome,
) -> Result<CertaintyMatrix> {
    if traces.is_empty() {
        return Err(DroError::InvalidSequence("no reasoning traces to score".into()));
    }
    let rows = traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            score_reference(policy, prompt, t.as_ref(), reference).map_err(|e| DroError::Trace {
                trace: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CertaintyMatrix::new(rows)
}

/// Reference certainty with the reasoning replaced by a fixed masked trace.
pub fn masked_baseline(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    masked: &MaskedTrace,
    reference: &ReferenceOutcome,
) -> Result<CertaintyRow> {
    score_reference(policy, prompt, masked.tokens(), reference)
}

type BaselineKey = (u64, Vec<TokenId>, Vec<TokenId>, Vec<TokenId>);

/// Baseline rows memoized per (policy version, prompt, mask, reference).
/// Readers share the lock; a miss computes outside it and inserts once.
#[derive(Debug, Default)]
pub struct BaselineCache {
    rows: RwLock<HashMap<BaselineKey, CertaintyRow>>,
}

impl BaselineCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &self,
        policy: &PolicySnapshot,
        prompt: &Prompt,
        masked: &MaskedTrace,
        reference: &ReferenceOutcome,
    ) -> Result<CertaintyRow> {
        let key = (
            policy.version(),
            prompt.tokens().to_vec(),
            masked.tokens().to_vec(),
            reference.tokens().to_vec(),
        );
        if let Some(row) = self.rows.read().expect("baseline cache poisoned").get(&key) {
            return Ok(row.clone());
        }
        let row = masked_baseline(policy, prompt, masked, reference)?;
        self.rows
            .write()
            .expect("baseline cache poisoned")
            .entry(key)
            .or_insert_with(|| row.clone());
        Ok(row)
    }

    pub fn len(&self) -> usize {
        self.rows.read().expect("baseline cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
