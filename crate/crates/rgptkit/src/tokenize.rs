//! Whitespace word tokenizer with a built vocabulary.
//!
//! Serves as the hermetic stand-in for a real subword tokenizer: words are
//! whatever `split_whitespace` yields, the vocabulary is built from a corpus
//! once, and three control tokens occupy fixed ids. Decoding joins words
//! with single spaces, so any single-spaced text over known words round-trips
//! exactly.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const EOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const EOS_TEXT: &str = "<eos>";
const PAD_TEXT: &str = "<pad>";
const UNK_TEXT: &str = "<unk>";

/// Minimal tokenizer interface used by sequence assembly and generation.
pub trait Tokenize: Send + Sync {
    /// Split text into token ids; unknown words map to the unk id.
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Join token surface forms with single spaces, skipping eos/pad.
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    /// Build a vocabulary from corpus texts. Words are collected, deduped,
    /// and sorted so the id assignment is independent of text order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut unique: Vec<String> = corpus
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        unique.sort();
        unique.dedup();
        // Control tokens could appear verbatim in corpus text; they already
        // have reserved ids.
        unique.retain(|w| w != EOS_TEXT && w != PAD_TEXT && w != UNK_TEXT);
        let mut words = vec![EOS_TEXT.to_string(), PAD_TEXT.to_string(), UNK_TEXT.to_string()];
        words.extend(unique);
        Self::from_words(words).expect("constructed vocabulary is well-formed")
    }

    /// Restore a tokenizer from an explicit word list (checkpoint payload).
    /// The first three entries must be the control tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3
            || words[EOS_ID as usize] != EOS_TEXT
            || words[PAD_ID as usize] != PAD_TEXT
            || words[UNK_ID as usize] != UNK_TEXT
        {
            return Err(Error::Checkpoint(
                "vocabulary must start with <eos>, <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(WordTokenizer { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

impl Tokenize for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS_ID || id == PAD_ID {
                continue;
            }
            let word = self
                .words
                .get(id as usize)
                .map(String::as_str)
                .unwrap_or(UNK_TEXT);
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }
}
