//! Word-level tokenizer: lowercase, punctuation split, whitespace tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Split text into lowercase word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Tokenizer {
    /// Build a vocabulary from `texts`. Words seen fewer than `min_count` times
    /// are dropped; at most `max_size` ids are assigned including the five
    /// reserved tokens. `reserved_words` are always included.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: usize,
        reserved_words: &[&str],
    ) -> Result<Self> {
        if max_size < SPECIALS.len() + reserved_words.len() {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} cannot hold the reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in reserved_words {
            for piece in split_words(w) {
                if !tokens.contains(&piece) {
                    tokens.push(piece);
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !tokens.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in ranked {
            if tokens.len() >= max_size {
                break;
            }
            tokens.push(w);
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, lookup }
    }

    /// Reserved tokens followed by `words` in order (duplicates dropped).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Complete-word entries of the vocabulary (reserved tokens excluded).
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[SPECIALS.len()..].iter().map(String::as_str)
    }

    /// Token ids without special tokens; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// `[CLS] text [SEP]`, truncated to `max_len`. The flag reports truncation.
    pub fn encode_with_specials(&self, text: &str, max_len: usize) -> (Vec<usize>, bool) {
        let body = self.encode(text);
        let room = max_len.saturating_sub(2);
        let truncated = body.len() > room;
        let mut ids = Vec::with_capacity(body.len().min(room) + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(&body[..body.len().min(room)]);
        ids.push(SEP_ID);
        (ids, truncated)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Tokenizer = serde_json::from_str(text)?;
        if raw.tokens.len() < SPECIALS.len()
            || raw.tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b)
        {
            return Err(Error::Format("tokenizer lacks the reserved tokens".into()));
        }
        Ok(Self::from_tokens(raw.tokens))
    }
}
