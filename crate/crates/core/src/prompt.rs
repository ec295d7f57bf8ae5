//! Word-level vocabulary, prompts and token masking.
//!
//! A prompt is laid out as `[SOS] w_1 .. w_k [EOS] [PAD]..` over a fixed
//! length. Only the words carry `mask = true`; special tokens are masked so
//! they can neither contribute to nor be credited for the output.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const DEFAULT_MAX_TOKENS: usize = 16;

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "magenta"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const FILLER: [&str; 8] = ["a", "the", "with", "on", "photo", "stock", "free", "."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Shape,
    Color,
    Size,
    Filler,
}

impl TokenClass {
    /// Shape, color and size words.
    pub fn is_content(self) -> bool {
        matches!(self, TokenClass::Shape | TokenClass::Color | TokenClass::Size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = ["<pad>", "<sos>", "<eos>"]
            .iter()
            .chain(SHAPES.iter())
            .chain(COLORS.iter())
            .chain(SIZES.iter())
            .chain(FILLER.iter())
            .map(|s| s.to_string())
            .collect();
        Vocab::from_words(words).expect("builtin vocabulary is valid")
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 4 || words[PAD] != "<pad>" || words[SOS] != "<sos>" || words[EOS] != "<eos>" {
            return Err(Error::Data("vocabulary must start with <pad>, <sos>, <eos>".into()));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Vocab::from_words(self.words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn class(&self, id: usize) -> TokenClass {
        let w = self.word(id).unwrap_or("");
        if id <= EOS {
            TokenClass::Special
        } else if SHAPES.contains(&w) {
            TokenClass::Shape
        } else if COLORS.contains(&w) {
            TokenClass::Color
        } else if SIZES.contains(&w) {
            TokenClass::Size
        } else {
            TokenClass::Filler
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

/// Lowercase, split on whitespace and detach trailing periods as their own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let stem = lower.trim_end_matches('.');
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        for _ in 0..(lower.len() - stem.len()) {
            out.push(".".to_string());
        }
    }
    out
}

impl Prompt {
    /// Tokenize `text` into a prompt of `max_tokens` positions.
    pub fn parse(text: &str, vocab: &Vocab, max_tokens: usize) -> Result<Self> {
        let words = split_words(text);
        let mut ids = Vec::with_capacity(words.len());
        for w in &words {
            match vocab.id(w) {
                Some(id) if id > EOS => ids.push(id),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown word '{w}'; vocabulary: {}",
                        vocab.words()[EOS + 1..].join(" ")
                    )))
                }
            }
        }
        Prompt::from_word_ids(&ids, max_tokens)
    }

    /// Build from word ids (no special tokens).
    pub fn from_word_ids(words: &[usize], max_tokens: usize) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("prompt is empty after masking".into()));
        }
        if words.len() + 2 > max_tokens {
            return Err(Error::Config(format!(
                "prompt has {} words; at most {} fit in {max_tokens} positions",
                words.len(),
                max_tokens.saturating_sub(2)
            )));
        }
        let mut ids = vec![PAD; max_tokens];
        let mut mask = vec![false; max_tokens];
        ids[0] = SOS;
        for (i, &w) in words.iter().enumerate() {
            ids[i + 1] = w;
            mask[i + 1] = true;
        }
        ids[words.len() + 1] = EOS;
        Ok(Prompt { ids, mask })
    }

    /// Build from raw ids and mask, as read back from a manifest.
    pub fn from_parts(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() || ids.is_empty() {
            return Err(Error::Data(format!("{} ids with {} mask flags", ids.len(), mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("prompt is empty after masking".into()));
        }
        Ok(Prompt { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions with `mask = true`.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    /// A copy with position `i` additionally masked. Errors if nothing would remain.
    pub fn with_masked(&self, i: usize) -> Result<Self> {
        let mut p = self.clone();
        if i >= p.len() {
            return Err(Error::Config(format!("token index {i} outside prompt of length {}", p.len())));
        }
        p.mask[i] = false;
        if !p.mask.iter().any(|&m| m) {
            return Err(Error::Config("prompt is empty after masking".into()));
        }
        Ok(p)
    }

    /// Human-readable words for every position, specials included.
    pub fn tokens(&self, vocab: &Vocab) -> Vec<String> {
        self.ids
            .iter()
            .map(|&id| vocab.word(id).unwrap_or("<?>").to_string())
            .collect()
    }

    /// Words at unmasked positions joined by spaces.
    pub fn text(&self, vocab: &Vocab) -> String {
        self.content_positions()
            .iter()
            .map(|&i| vocab.word(self.ids[i]).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Filename-safe slug of the content words.
    pub fn slug(&self, vocab: &Vocab) -> String {
        let words: Vec<&str> = self
            .content_positions()
            .iter()
            .filter_map(|&i| vocab.word(self.ids[i]))
            .filter(|w| *w != ".")
            .collect();
        words.join("-")
    }
}

/// Concatenated mask flags of a batch, as consumed by attention.
pub fn batch_keep(prompts: &[Prompt]) -> Arc<[bool]> {
    prompts.iter().flat_map(|p| p.mask.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_masks_specials() {
        let v = Vocab::default();
        let p = Prompt::parse("A red circle.", &v, 8).unwrap();
        let words = p.tokens(&v);
        assert_eq!(words, ["<sos>", "a", "red", "circle", ".", "<eos>", "<pad>", "<pad>"]);
        assert_eq!(p.mask(), [false, true, true, true, true, false, false, false]);
        assert_eq!(p.slug(&v), "a-red-circle");
    }

    #[test]
    fn unknown_word_lists_vocabulary() {
        let v = Vocab::default();
        let err = Prompt::parse("a purple circle", &v, 16).unwrap_err().to_string();
        assert!(err.contains("purple") && err.contains("magenta") && err.contains("ring"));
    }

    #[test]
    fn empty_and_overlong_prompts() {
        let v = Vocab::default();
        assert!(Prompt::parse("   ", &v, 16).is_err());
        assert!(Prompt::parse("a a a a a a a", &v, 8).is_err());
        let p = Prompt::parse("circle", &v, 16).unwrap();
        assert!(p.with_masked(1).is_err());
    }

    #[test]
    fn token_classes() {
        let v = Vocab::default();
        assert_eq!(v.class(v.id("ring").unwrap()), TokenClass::Shape);
        assert_eq!(v.class(v.id("yellow").unwrap()), TokenClass::Color);
        assert_eq!(v.class(v.id("large").unwrap()), TokenClass::Size);
        assert_eq!(v.class(v.id("stock").unwrap()), TokenClass::Filler);
        assert_eq!(v.class(EOS), TokenClass::Special);
    }
}
