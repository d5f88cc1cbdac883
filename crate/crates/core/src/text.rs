//! Tokenization and the shared word vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const EOS: &str = "[EOS]";
pub const PH: &str = "[PH]";
pub const REC: &str = "[REC]";
pub const SEP: &str = "[SEP]";
pub const SEEKER: &str = "<seeker>";
pub const RECOMMENDER: &str = "<rec>";

/// Special tokens, in their fixed id order.
pub const SPECIALS: [&str; 8] = [PAD, UNK, EOS, PH, REC, SEP, SEEKER, RECOMMENDER];

/// Lowercases and splits on whitespace; punctuation characters become
/// single-character tokens. Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || (ch == '\'' && !cur.is_empty()) {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Ids of the special tokens in a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub eos: usize,
    pub ph: usize,
    pub rec: usize,
    pub sep: usize,
    pub seeker: usize,
    pub recommender: usize,
}

/// Word vocabulary; specials occupy ids `0..8`, the rest is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let rest: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Self::from_tokens(tokens).expect("specials are present by construction")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Invalid(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(1)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            unk: 1,
            eos: 2,
            ph: 3,
            rec: 4,
            sep: 5,
            seeker: 6,
            recommender: 7,
        }
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
