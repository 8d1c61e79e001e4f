//! Toy caption tokenizer with a closed vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: u32 = 0;
pub const NULL_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

pub const DEFAULT_VOCAB_SIZE: usize = 1024;
pub const DEFAULT_MAX_LEN: usize = 32;

/// Lowercased whitespace-separated words.
pub fn words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the most frequent words (ties broken alphabetically) that fit
    /// after the reserved ids.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, size: usize) -> Self {
        assert!(size > FIRST_WORD_ID as usize, "vocabulary too small");
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in words(c) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(size - FIRST_WORD_ID as usize);
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect(), size)
    }

    pub fn from_words(words: Vec<String>, size: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
        Self { size, words, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_words(self.words, self.size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<u32>,
}

impl TextTokens {
    /// The dropped-text condition.
    pub fn null(max_len: usize) -> Self {
        Self {
            ids: vec![NULL_ID; max_len],
        }
    }

    pub fn is_null(&self) -> bool {
        self.ids.iter().all(|&i| i == NULL_ID)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row lookup in a `[vocab, D]` embedding table.
    pub fn embed<T: Scalar>(&self, table: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(self.ids.len(), table.cols());
        for (r, &id) in self.ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id as usize));
        }
        out
    }
}

/// Tokenizes, maps unknown words to UNK, and pads or truncates to `max_len`.
pub fn encode_text(caption: &str, vocab: &Vocab, max_len: usize) -> TextTokens {
    let mut ids: Vec<u32> = words(caption).map(|w| vocab.id(&w)).take(max_len).collect();
    ids.resize(max_len, PAD_ID);
    TextTokens { ids }
}
