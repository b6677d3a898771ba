//! Toy vocabulary and glyph-level tokenization.
//!
//! The default vocabulary has 24 entries: ten digits, the letters `a`–`h`,
//! two operators (`+`, `=`) and four reserved markers. Tokenization is a
//! greedy longest-match over the symbol table, which for single-glyph
//! symbols is just a per-character lookup.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(value: usize) -> Self {
        TokenId(value as u32)
    }
}

/// Symbol table plus the four reserved markers.
///
/// Serializes to the vocabulary file format
/// `{"symbols": [..], "bos": n, "eos": n, "think_end": n, "pad": n}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    symbols: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    think_end: TokenId,
    pad: TokenId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    symbols: Vec<String>,
    bos: usize,
    eos: usize,
    think_end: usize,
    pad: usize,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = DroError;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        Vocabulary::new(file.symbols, file.bos, file.eos, file.think_end, file.pad)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            bos: v.bos.index(),
            eos: v.eos.index(),
            think_end: v.think_end.index(),
            pad: v.pad.index(),
            symbols: v.symbols,
        }
    }
}

/// Letters usable as copy_edit base symbols, in successor order.
pub const LETTERS: &str = "abcdefgh";

impl Vocabulary {
    pub fn new(
        symbols: Vec<String>,
        bos: usize,
        eos: usize,
        think_end: usize,
        pad: usize,
    ) -> Result<Self> {
        if symbols.iter().any(|s| s.is_empty()) {
            return Err(DroError::InvalidVocabulary("empty symbol".into()));
        }
        let mut seen = HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(DroError::InvalidVocabulary(format!("duplicate symbol {s:?}")));
            }
        }
        let reserved = [bos, eos, think_end, pad];
        for (i, &r) in reserved.iter().enumerate() {
            if r >= symbols.len() {
                return Err(DroError::InvalidVocabulary(format!(
                    "reserved index {r} outside vocabulary of size {}",
                    symbols.len()
                )));
            }
            if reserved[..i].contains(&r) {
                return Err(DroError::InvalidVocabulary(format!(
                    "reserved index {r} used twice"
                )));
            }
        }
        Ok(Vocabulary {
            symbols,
            bos: bos.into(),
            eos: eos.into(),
            think_end: think_end.into(),
            pad: pad.into(),
        })
    }

    /// `0-9`, `a-h`, `+`, `=`, then `^` (BOS), `$` (EOS), `|` (THINK_END), `_` (PAD).
    pub fn default_toy() -> Self {
        let mut symbols: Vec<String> = ('0'..='9').map(String::from).collect();
        symbols.extend(LETTERS.chars().map(String::from));
        symbols.extend(["+", "=", "^", "$", "|", "_"].map(String::from));
        Vocabulary::new(symbols, 20, 21, 22, 23).expect("default vocabulary is valid")
    }

    /// Smallest vocabulary with the reserved markers plus `n_free` plain symbols.
    /// Used for exhaustive checks on tiny tables.
    pub fn tiny(n_free: usize) -> Self {
        let mut symbols: Vec<String> = (0..n_free).map(|i| format!("s{i}")).collect();
        symbols.extend(["^", "$", "|", "_"].map(String::from));
        let base = n_free;
        Vocabulary::new(symbols, base, base + 1, base + 2, base + 3).expect("tiny vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn think_end(&self) -> TokenId {
        self.think_end
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn is_reserved(&self, t: TokenId) -> bool {
        t == self.bos || t == self.eos || t == self.think_end || t == self.pad
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol).map(TokenId::from)
    }

    pub fn symbol(&self, t: TokenId) -> Option<&str> {
        self.symbols.get(t.index()).map(String::as_str)
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().position(|t| t.index() >= self.len()) {
            Some(index) => Err(DroError::TokenOutOfRange {
                id: tokens[index].index(),
                size: self.len(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = self
                .symbols
                .iter()
                .enumerate()
                .filter(|(_, s)| rest.starts_with(s.as_str()))
                .max_by_key(|(i, s)| (s.len(), std::cmp::Reverse(*i)));
            match best {
                Some((i, s)) => {
                    out.push(TokenId::from(i));
                    rest = &rest[s.len()..];
                }
                None => {
                    return Err(DroError::UnknownGlyph {
                        text: text.to_string(),
                        offset: text.len() - rest.len(),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        self.check(tokens)?;
        Ok(tokens.iter().map(|t| self.symbols[t.index()].as_str()).collect())
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::default_toy()
    }
}
