use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Dense token-to-id map. Ids 0, 1 and 2 are reserved for padding, unknown and mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits text into lowercase word and punctuation tokens.
///
/// Alphanumeric runs form words; every other non-whitespace character is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const MASK_ID: usize = 2;

    /// Builds from a corpus keeping tokens seen at least `min_freq` times.
    ///
    /// Order is by descending frequency, then lexicographic, so the result is
    /// independent of corpus order.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in split_words(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            kept.truncate(max.saturating_sub(3));
        }
        Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)).expect("counted tokens are unique")
    }

    /// Builds from an ordered token list; the reserved tokens are prepended.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), MASK_TOKEN.to_string()];
        all.extend(tokens);
        Vocabulary::from_id_order(all)
    }

    /// Rebuilds from the full id-ordered list (including reserved tokens).
    pub fn from_id_order(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN || tokens[2] != MASK_TOKEN {
            return Err(Error::invalid("vocabulary must start with [PAD], [UNK], [MASK]"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids for `text`; empty text yields a single unknown id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = split_words(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![Self::UNK_ID]
        } else {
            ids
        }
    }
}
