// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer with reserved special tokens.
//!
//! Words are lower-cased runs of letters/digits; every other non-space
//! character is its own token; placeholder tags such as `<PERSON_2>` are kept
//! whole and case-sensitive.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<[A-Z]+(?:_\d+)?>|[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("token regex")
    })
}

/// Splits text into word-level pieces (no vocabulary lookup).
pub fn split_words(text: &str) -> Vec<String> {
    token_regex()
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if s.starts_with('<') && s.len() > 1 {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: OnceLock<HashMap<String, u32>>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
    }
}

impl Eq for Tokenizer {}

impl Tokenizer {
    /// Builds a vocabulary from every word in `texts`, sorted for determinism.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        Self {
            vocab,
            index: OnceLock::new(),
        }
    }

    fn index(&self) -> &HashMap<String, u32> {
        self.index.get_or_init(|| {
            self.vocab
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32))
                .collect()
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Encodes without special tokens; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let index = self.index();
        split_words(text)
            .iter()
            .map(|w| index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.vocab.get(i as usize).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }
}
