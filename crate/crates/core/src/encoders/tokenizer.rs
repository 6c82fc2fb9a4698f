use std::collections::BTreeSet;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 16;

/// Whitespace, lowercase tokenizer over a closed vocabulary.
///
/// Ids `0` and `1` are reserved for padding and unknown words; the rest are
/// assigned in sorted word order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTokenizer {
    vocab: IndexMap<String, usize>,
    max_len: usize,
}

impl TextTokenizer {
    /// Builds the vocabulary from every word appearing in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Result<Self> {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|w| w != PAD && w != UNK)
            .collect();
        Self::from_words(words.into_iter().collect(), max_len)
    }

    /// `words` excludes the reserved tokens, which are prepended.
    pub fn from_words(words: Vec<String>, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be positive".into()));
        }
        let mut vocab = IndexMap::new();
        vocab.insert(PAD.to_string(), 0);
        vocab.insert(UNK.to_string(), 1);
        for w in words {
            let next = vocab.len();
            vocab.entry(w).or_insert(next);
        }
        Ok(TextTokenizer { vocab, max_len })
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> Vec<String> {
        self.vocab.keys().skip(2).cloned().collect()
    }

    pub fn id(&self, word: &str) -> usize {
        self.vocab.get(&word.to_lowercase()).copied().unwrap_or(1)
    }

    /// Token ids padded (or truncated) to `max_len`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text.split_whitespace().map(|w| self.id(w)).take(self.max_len).collect();
        ids.resize(self.max_len, self.pad_id());
        ids
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words()).expect("string list serializes")
    }

    pub fn from_json(s: &str, max_len: usize) -> Result<Self> {
        let words: Vec<String> = serde_json::from_str(s)?;
        Self::from_words(words, max_len)
    }
}
