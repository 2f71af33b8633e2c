//! Contrastive Tension: two encoders trained to agree on identical sentences
//! and disagree on different ones.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{bce_term, Graph, LrSchedule, OptimizerKind, Var};
use crate::encoder::{BoundEncoder, EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::train::Trainer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtPair {
    pub sentence_a: String,
    pub sentence_b: String,
    /// 1 for an identical pair, 0 otherwise.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtBatch {
    pairs: Vec<CtPair>,
}

impl CtBatch {
    pub fn new(pairs: Vec<CtPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty CT batch"));
        }
        for p in &pairs {
            if p.label > 1 {
                return Err(Error::invalid(format!("CT label must be 0 or 1, got {}", p.label)));
            }
            if p.label == 1 && p.sentence_a != p.sentence_b {
                return Err(Error::invalid("positive CT pair with differing sentences"));
            }
        }
        Ok(CtBatch { pairs })
    }

    pub fn pairs(&self) -> &[CtPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn composition(&self) -> (usize, usize) {
        let pos = self.pairs.iter().filter(|p| p.label == 1).count();
        (pos, self.pairs.len() - pos)
    }

    /// Swaps sentence order within each pair.
    pub fn transposed(&self) -> CtBatch {
        CtBatch {
            pairs: self
                .pairs
                .iter()
                .map(|p| CtPair {
                    sentence_a: p.sentence_b.clone(),
                    sentence_b: p.sentence_a.clone(),
                    label: p.label,
                })
                .collect(),
        }
    }
}

/// Endless deterministic stream of CT batches.
///
/// Each block of `negatives_per_positive + 1` pairs holds one sentence paired
/// with itself followed by pairs with distinct other sentences.
#[derive(Debug, Clone)]
pub struct CtBatchSampler {
    sentences: Vec<String>,
    negatives: usize,
    blocks_per_batch: usize,
    rng: ChaCha8Rng,
}

pub fn sample_ct_batches<S: AsRef<str>>(
    corpus: &[S],
    negatives_per_positive: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CtBatchSampler> {
    CtBatchSampler::new(corpus, negatives_per_positive, batch_size, seed)
}

impl CtBatchSampler {
    pub fn new<S: AsRef<str>>(corpus: &[S], negatives_per_positive: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let block = negatives_per_positive + 1;
        if batch_size == 0 || !batch_size.is_multiple_of(block) {
            return Err(Error::invalid(format!(
                "batch size {batch_size} is not a positive multiple of {block} (1 positive + {negatives_per_positive} negatives)"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let sentences: Vec<String> = corpus
            .iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| seen.insert(s.clone()))
            .collect();
        if sentences.len() < 2 {
            return Err(Error::invalid("CT sampling needs at least 2 distinct sentences"));
        }
        Ok(CtBatchSampler {
            sentences,
            negatives: negatives_per_positive,
            blocks_per_batch: batch_size / block,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for CtBatchSampler {
    type Item = CtBatch;

    fn next(&mut self) -> Option<CtBatch> {
        let n = self.sentences.len();
        let mut pairs = Vec::with_capacity(self.blocks_per_batch * (self.negatives + 1));
        for _ in 0..self.blocks_per_batch {
            let i = self.rng.random_range(0..n);
            let anchor = &self.sentences[i];
            pairs.push(CtPair {
                sentence_a: anchor.clone(),
                sentence_b: anchor.clone(),
                label: 1,
            });
            let others: Vec<usize> = if self.negatives < n {
                index::sample(&mut self.rng, n - 1, self.negatives).into_vec()
            } else {
                (0..self.negatives).map(|_| self.rng.random_range(0..n - 1)).collect()
            };
            for j in others {
                let j = if j >= i { j + 1 } else { j };
                pairs.push(CtPair {
                    sentence_a: anchor.clone(),
                    sentence_b: self.sentences[j].clone(),
                    label: 0,
                });
            }
        }
        Some(CtBatch { pairs })
    }
}

/// Graph form of the CT loss: mean BCE of `sigmoid(<a(s_a), b(s_b)>)` against the labels.
#[allow(clippy::too_many_arguments)]
pub fn ct_loss_var(
    g: &mut Graph,
    model_a: &EncoderModel,
    bound_a: &BoundEncoder,
    model_b: &EncoderModel,
    bound_b: &BoundEncoder,
    batch: &CtBatch,
    pool: PoolingSpec,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty CT batch"));
    }
    let mut logits = Vec::with_capacity(batch.len());
    for p in batch.pairs() {
        let ea = model_a.embed_var(g, bound_a, &p.sentence_a, pool)?;
        let eb = model_b.embed_var(g, bound_b, &p.sentence_b, pool)?;
        let prod = g.mul(ea, eb)?;
        logits.push(g.sum(prod));
    }
    let logits = g.concat_cols(&logits)?;
    let labels: Vec<f64> = batch.pairs().iter().map(|p| p.label as f64).collect();
    g.bce_with_logits(logits, &labels)
}

/// CT loss value without building gradients for either model.
pub fn ct_loss(model_a: &EncoderModel, model_b: &EncoderModel, batch: &CtBatch, pool: PoolingSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty CT batch"));
    }
    let mut total = 0.0;
    for p in batch.pairs() {
        let ea = model_a.encode(&p.sentence_a, pool)?;
        let eb = model_b.encode(&p.sentence_b, pool)?;
        let logit: f64 = ea.as_slice().iter().zip(eb.as_slice()).map(|(x, y)| x * y).sum();
        total += bce_term(logit, p.label as f64);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub pool: PoolingSpec,
    /// Keep the second encoder after training (the first otherwise).
    pub keep_second: bool,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            steps: 150,
            batch_size: 16,
            negatives_per_positive: 7,
            start_lr: 3e-4,
            end_lr: 6e-5,
            pool: PoolingSpec::FINAL,
            keep_second: true,
        }
    }
}

impl CtConfig {
    /// Full-scale values: 50k RMSProp steps decaying from 1e-5 to 2e-6.
    pub fn paper_scale() -> Self {
        CtConfig {
            steps: 50_000,
            start_lr: 1e-5,
            end_lr: 2e-6,
            ..CtConfig::default()
        }
    }
}

/// Trains two copies of `base` with CT and returns the surviving encoder.
pub fn train_ct<S: AsRef<str>>(base: &EncoderModel, corpus: &[S], config: &CtConfig, seed: u64) -> Result<EncoderModel> {
    let mut model_a = base.clone();
    let mut model_b = base.clone();
    let schedule = LrSchedule::decay(config.start_lr, config.end_lr, config.steps);
    let mut trainer_a = Trainer::new(OptimizerKind::rmsprop(), schedule, model_a.params());
    let mut trainer_b = Trainer::new(OptimizerKind::rmsprop(), schedule, model_b.params());
    let mut sampler = CtBatchSampler::new(corpus, config.negatives_per_positive, config.batch_size, seed)?;
    for _ in 0..config.steps {
        let batch = sampler.next().expect("sampler is endless");
        let mut g = Graph::new();
        let bound_a = model_a.bind(&mut g, true);
        let bound_b = model_b.bind(&mut g, true);
        let loss = ct_loss_var(&mut g, &model_a, &bound_a, &model_b, &bound_b, &batch, config.pool)?;
        let grads = g.backward(loss)?;
        let ga = bound_a.grads(&grads);
        let gb = bound_b.grads(&grads);
        trainer_a.step(model_a.params_mut(), &ga)?;
        trainer_b.step(model_b.params_mut(), &gb)?;
    }
    Ok(if config.keep_second { model_b } else { model_a })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        (0..30).map(|i| format!("sentence number {i}")).collect()
    }

    #[test]
    fn batch_of_sixteen_has_two_positives() {
        let s = CtBatchSampler::new(&corpus(), 7, 16, 4).unwrap();
        for b in s.take(50) {
            assert_eq!(b.composition(), (2, 14));
            for p in b.pairs() {
                if p.label == 0 {
                    assert_ne!(p.sentence_a, p.sentence_b);
                }
            }
        }
    }

    #[test]
    fn single_positive_batches() {
        let s = CtBatchSampler::new(&corpus(), 0, 1, 4).unwrap();
        for b in s.take(10) {
            assert_eq!(b.len(), 1);
            assert_eq!(b.composition(), (1, 0));
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let a: Vec<_> = CtBatchSampler::new(&corpus(), 3, 8, 9).unwrap().take(5).collect();
        let b: Vec<_> = CtBatchSampler::new(&corpus(), 3, 8, 9).unwrap().take(5).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_within_block_are_distinct() {
        let s = CtBatchSampler::new(&corpus(), 7, 16, 1).unwrap();
        for b in s.take(20) {
            for block in b.pairs().chunks(8) {
                let mut others: Vec<&str> = block[1..].iter().map(|p| p.sentence_b.as_str()).collect();
                others.sort();
                others.dedup();
                assert_eq!(others.len(), 7);
            }
        }
    }

    #[test]
    fn invalid_sampler_inputs() {
        assert!(CtBatchSampler::new(&corpus(), 7, 12, 0).is_err());
        assert!(CtBatchSampler::new(&["same", "same"], 1, 2, 0).is_err());
    }

    #[test]
    fn batch_invariants() {
        let bad = CtPair {
            sentence_a: "a".into(),
            sentence_b: "b".into(),
            label: 1,
        };
        assert!(CtBatch::new(vec![bad]).is_err());
        assert!(CtBatch::new(vec![]).is_err());
    }
}
