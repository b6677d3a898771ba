//! Synthetic tasks.
//!
//! `copy_edit`: the prompt is a base string of letters in which one to three
//! positions are replaced by the instruction `+`, meaning "the letter after
//! the previous one" (cyclic over `a`–`h`). The reference is the base with
//! those positions rewritten accordingly. Every other reference token is a
//! straight copy of the prompt, so only the edited positions depend on the
//! reasoning.
//!
//! `arithmetic_chain`: the prompt is `d0+d1+…+dn=` with single digits; the
//! gold reasoning lists the running sums mod 10 and the reference is the final
//! digit.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::rng;
use crate::sequence::{Prompt, ReferenceOutcome};
use crate::vocab::{TokenId, Vocabulary, LETTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyEdit,
    ArithmeticChain,
}

impl std::str::FromStr for TaskKind {
    type Err = DroError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_edit" | "copy-edit" => Ok(TaskKind::CopyEdit),
            "arithmetic_chain" | "arithmetic-chain" => Ok(TaskKind::ArithmeticChain),
            other => Err(DroError::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Inclusive `[min, max]` ranges for the generators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskKnobs {
    pub edits: [usize; 2],
    pub base_len: [usize; 2],
    pub additions: [usize; 2],
}

impl Default for TaskKnobs {
    fn default() -> Self {
        TaskKnobs {
            edits: [1, 3],
            base_len: [12, 24],
            additions: [2, 4],
        }
    }
}

impl TaskKnobs {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("edits", self.edits),
            ("base_len", self.base_len),
            ("additions", self.additions),
        ] {
            if lo > hi {
                return Err(DroError::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.base_len[0] < 2 {
            return Err(DroError::Config("base_len must be >= 2".into()));
        }
        if self.additions[0] < 1 {
            return Err(DroError::Config("additions must be >= 1".into()));
        }
        // non-adjacent edits in positions 1..len
        let room = self.base_len[0] / 2;
        if self.edits[1] > room {
            return Err(DroError::Config(format!(
                "{} edits do not fit a base of length {}",
                self.edits[1], self.base_len[0]
            )));
        }
        Ok(())
    }
}

/// A prompt/reference pair with an id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub prompt: Prompt,
    pub reference: ReferenceOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub task: Task,
    /// Diagnostic only; never used by any reward.
    pub gold_reasoning: Option<Vec<TokenId>>,
    /// Edited reference positions (0-based), for copy_edit.
    pub edited: Vec<usize>,
}

fn lookup(vocab: &Vocabulary, symbol: &str) -> Result<TokenId> {
    vocab
        .id_of(symbol)
        .ok_or_else(|| DroError::InvalidVocabulary(format!("vocabulary lacks {symbol:?}")))
}

fn draw(rng: &mut impl Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.gen_range(lo..=hi)
}

/// Build one task from `seed`. The id is left empty; pool builders assign it.
pub fn gen_task(kind: TaskKind, seed: u64, knobs: &TaskKnobs, vocab: &Vocabulary) -> Result<SyntheticTask> {
    knobs.validate()?;
    let mut rng = rng::stream(seed, "task", &[]);
    match kind {
        TaskKind::CopyEdit => copy_edit(&mut rng, knobs, vocab),
        TaskKind::ArithmeticChain => arithmetic_chain(&mut rng, knobs, vocab),
    }
}

fn copy_edit(rng: &mut impl Rng, knobs: &TaskKnobs, vocab: &Vocabulary) -> Result<SyntheticTask> {
    let letters = LETTERS
        .chars()
        .map(|c| lookup(vocab, &c.to_string()))
        .collect::<Result<Vec<_>>>()?;
    let plus = lookup(vocab, "+")?;
    let len = draw(rng, knobs.base_len);
    let edits = draw(rng, knobs.edits);
    let base: Vec<usize> = (0..len).map(|_| rng.gen_range(0..letters.len())).collect();

    // e non-adjacent positions in 1..len: choose e of the len - e slots, spread out
    let slots = len - edits;
    let mut picks: Vec<usize> = sample(rng, slots, edits).into_iter().collect();
    picks.sort_unstable();
    let edited: Vec<usize> = picks.iter().enumerate().map(|(n, &p)| p + 1 + n).collect();

    let mut reference = base.clone();
    for &p in &edited {
        reference[p] = (reference[p - 1] + 1) % letters.len();
    }
    let mut prompt: Vec<TokenId> = base.iter().map(|&i| letters[i]).collect();
    for &p in &edited {
        prompt[p] = plus;
    }
    let reference: Vec<TokenId> = reference.iter().map(|&i| letters[i]).collect();
    Ok(SyntheticTask {
        kind: TaskKind::CopyEdit,
        task: Task {
            id: String::new(),
            prompt: Prompt::new(prompt, vocab)?,
            reference: ReferenceOutcome::new(reference.clone(), vocab)?,
        },
        gold_reasoning: Some(reference),
        edited,
    })
}

fn arithmetic_chain(rng: &mut impl Rng, knobs: &TaskKnobs, vocab: &Vocabulary) -> Result<SyntheticTask> {
    let digits = (0..10)
        .map(|d| lookup(vocab, &d.to_string()))
        .collect::<Result<Vec<_>>>()?;
    let plus = lookup(vocab, "+")?;
    let equals = lookup(vocab, "=")?;
    let additions = draw(rng, knobs.additions);
    let operands: Vec<usize> = (0..=additions).map(|_| rng.gen_range(0..10)).collect();
    let mut prompt = vec![digits[operands[0]]];
    let mut sums = Vec::with_capacity(additions);
    let mut acc = operands[0];
    for &d in &operands[1..] {
        prompt.push(plus);
        prompt.push(digits[d]);
        acc = (acc + d) % 10;
        sums.push(digits[acc]);
    }
    prompt.push(equals);
    Ok(SyntheticTask {
        kind: TaskKind::ArithmeticChain,
        task: Task {
            id: String::new(),
            prompt: Prompt::new(prompt, vocab)?,
            reference: ReferenceOutcome::new(vec![digits[acc]], vocab)?,
        },
        gold_reasoning: Some(sums),
        edited: Vec::new(),
    })
}

/// `count` tasks with ids `{prefix}-{index:05}`, each from its own seed substream.
pub fn generate_pool(
    kind: TaskKind,
    count: usize,
    seed: u64,
    knobs: &TaskKnobs,
    vocab: &Vocabulary,
    prefix: &str,
) -> Result<Vec<SyntheticTask>> {
    (0..count)
        .map(|i| {
            let mut t = gen_task(kind, rng::stream_seed(seed, prefix, &[i as u64]), knobs, vocab)?;
            t.task.id = format!("{prefix}-{i:05}");
            Ok(t)
        })
        .collect()
}

/// Instruction tokens that the copying prior must not copy.
pub fn instruction_tokens(vocab: &Vocabulary) -> Vec<TokenId> {
    ["+", "="].iter().filter_map(|s| vocab.id_of(s)).collect()
}
