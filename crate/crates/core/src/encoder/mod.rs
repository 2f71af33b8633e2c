//! Tokenizer, transformer sentence encoder and mean-pooling rules.

mod model;
mod pretrain;
mod vocab;

pub use model::{param_names, BoundEncoder, EncoderConfig, EncoderModel, PreparedIds};
pub use pretrain::{pretrain_base, PretrainConfig};
pub use vocab::{split_words, Vocabulary, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-dimension sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * c).collect())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Number of final hidden layers averaged into an embedding (1, 2 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PoolingSpec(usize);

impl PoolingSpec {
    pub const FINAL: PoolingSpec = PoolingSpec(1);
    pub const LAST_TWO: PoolingSpec = PoolingSpec(2);
    pub const LAST_THREE: PoolingSpec = PoolingSpec(3);

    pub fn new(k: usize) -> Result<Self> {
        if (1..=3).contains(&k) {
            Ok(PoolingSpec(k))
        } else {
            Err(Error::invalid(format!("pooling over {k} layers; expected 1, 2 or 3")))
        }
    }

    pub fn k(self) -> usize {
        self.0
    }

    pub fn all() -> [PoolingSpec; 3] {
        [Self::FINAL, Self::LAST_TWO, Self::LAST_THREE]
    }
}

impl TryFrom<usize> for PoolingSpec {
    type Error = Error;

    fn try_from(k: usize) -> Result<Self> {
        PoolingSpec::new(k)
    }
}

impl From<PoolingSpec> for usize {
    fn from(p: PoolingSpec) -> usize {
        p.0
    }
}
