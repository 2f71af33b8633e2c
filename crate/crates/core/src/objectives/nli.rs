//! Siamese NLI classification over `[u; v; |u - v|]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::LabeledNliPair;
use crate::diffcore::{log_sum_exp, Graph, LrSchedule, OptimizerKind, Tensor, Var};
use crate::encoder::{BoundEncoder, EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::train::Trainer;

pub const NLI_CLASSES: usize = 3;

/// Single affine map from the `3 * dim` feature vector to three class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NliHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl NliHead {
    pub fn zeros(dim: usize) -> Self {
        NliHead {
            weight: Tensor::zeros(&[3 * dim, NLI_CLASSES]),
            bias: Tensor::zeros(&[1, NLI_CLASSES]),
        }
    }

    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NliHead {
            weight: Tensor::randn(&[3 * dim, NLI_CLASSES], (3.0 * dim as f64).powf(-0.5), &mut rng),
            bias: Tensor::zeros(&[1, NLI_CLASSES]),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.weight.shape() != [3 * dim, NLI_CLASSES] || self.bias.shape() != [1, NLI_CLASSES] {
            return Err(Error::shape(format!(
                "NLI head {:?}/{:?} does not fit embeddings of dim {dim}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

fn features(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let diff = g.sub(u, v)?;
    let abs = g.abs(diff);
    g.concat_cols(&[u, v, abs])
}

/// Graph form of the NLI loss: mean softmax cross-entropy over the batch.
#[allow(clippy::too_many_arguments)]
pub fn nli_loss_var(
    g: &mut Graph,
    model: &EncoderModel,
    bound: &BoundEncoder,
    weight: Var,
    bias: Var,
    batch: &[LabeledNliPair],
    pool: PoolingSpec,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty NLI batch"));
    }
    let mut rows = Vec::with_capacity(batch.len());
    for ex in batch {
        let u = model.embed_var(g, bound, &ex.premise, pool)?;
        let v = model.embed_var(g, bound, &ex.hypothesis, pool)?;
        rows.push(features(g, u, v)?);
    }
    let x = g.concat_rows(&rows)?;
    let logits = g.matmul(x, weight)?;
    let logits = g.add_row(logits, bias)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
    g.softmax_cross_entropy(logits, &labels)
}

/// Class logits for one example.
pub fn nli_logits(model: &EncoderModel, head: &NliHead, ex: &LabeledNliPair, pool: PoolingSpec) -> Result<[f64; 3]> {
    head.check(model.dim())?;
    let u = model.encode(&ex.premise, pool)?;
    let v = model.encode(&ex.hypothesis, pool)?;
    let feats: Vec<f64> = u
        .as_slice()
        .iter()
        .chain(v.as_slice())
        .copied()
        .chain(u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| (a - b).abs()))
        .collect();
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = head.bias.data()[c]
            + feats
                .iter()
                .enumerate()
                .map(|(i, f)| f * head.weight.at(i, c))
                .sum::<f64>();
    }
    Ok(out)
}

/// Mean softmax cross-entropy of the siamese classifier over `batch`.
pub fn nli_siamese_loss(model: &EncoderModel, head: &NliHead, batch: &[LabeledNliPair], pool: PoolingSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty NLI batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let logits = nli_logits(model, head, ex, pool)?;
        total += log_sum_exp(&logits) - logits[ex.label.index()];
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub pool: PoolingSpec,
}

impl Default for NliConfig {
    fn default() -> Self {
        NliConfig {
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            pool: PoolingSpec::FINAL,
        }
    }
}

impl NliConfig {
    /// Full-scale values: one Adam epoch at 2e-5 with 10% warm-up.
    pub fn paper_scale() -> Self {
        NliConfig {
            lr: 2e-5,
            ..NliConfig::default()
        }
    }
}

/// Fine-tunes `base` on siamese NLI; the classifier head is discarded.
pub fn train_nli(base: &EncoderModel, data: &[LabeledNliPair], config: &NliConfig, seed: u64) -> Result<EncoderModel> {
    if data.is_empty() {
        return Err(Error::invalid("no NLI training data"));
    }
    let bs = config.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let mut model = base.clone();
    let head = NliHead::random(model.dim(), seed ^ 0x6e6c69);
    let n_model = model.params().len();
    let mut all: Vec<Tensor> = model.params().to_vec();
    all.push(head.weight);
    all.push(head.bias);
    let mut trainer = Trainer::new(
        OptimizerKind::adam(),
        LrSchedule::warmup(config.lr, config.warmup_fraction, total),
        &all,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<LabeledNliPair> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let w = g.param(all[n_model].clone());
            let b = g.param(all[n_model + 1].clone());
            let loss = nli_loss_var(&mut g, &model, &bound, w, b, &batch, config.pool)?;
            let grads = g.backward(loss)?;
            let mut grad_list = bound.grads(&grads);
            grad_list.push(grads.wrt(w));
            grad_list.push(grads.wrt(b));
            trainer.step(&mut all, &grad_list)?;
            model.params_mut().clone_from_slice(&all[..n_model]);
        }
    }
    Ok(model)
}
