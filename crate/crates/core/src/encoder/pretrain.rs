use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel, Vocabulary};
use crate::diffcore::{Graph, LrSchedule, OptimizerKind, Tensor};
use crate::error::{Error, Result};
use crate::train::Trainer;

/// Masked-token reconstruction settings for the base checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub mask_prob: f64,
    pub min_freq: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 32,
            lr: 2e-3,
            warmup_fraction: 0.1,
            mask_prob: 0.15,
            min_freq: 1,
            seed: 0,
        }
    }
}

/// Builds a vocabulary from `corpus` and trains a masked-token objective.
///
/// The output head is discarded; only the encoder is returned. With zero
/// steps the freshly initialised model is returned as is.
pub fn pretrain_base<S: AsRef<str>>(corpus: &[S], arch: EncoderConfig, config: &PretrainConfig) -> Result<EncoderModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if corpus.len() < config.batch_size || config.batch_size == 0 {
        return Err(Error::invalid(format!(
            "pretraining corpus has {} sentences, fewer than the batch size {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let vocab = Vocabulary::build(corpus, config.min_freq, None);
    let mut model = EncoderModel::init(arch, vocab, config.seed)?;
    if config.steps == 0 {
        return Ok(model);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6c_6d00);
    let vsize = model.vocab().size();
    let mut head = [Tensor::randn(&[arch.hidden, vsize], (arch.hidden as f64).powf(-0.5), &mut rng),
        Tensor::zeros(&[1, vsize])];
    let n_model = model.params().len();
    let mut all: Vec<Tensor> = model.params().iter().chain(head.iter()).cloned().collect();
    let mut trainer = Trainer::new(
        OptimizerKind::adam(),
        LrSchedule::warmup(config.lr, config.warmup_fraction, config.steps),
        &all,
    );

    let prepared: Vec<Vec<usize>> = corpus.iter().map(|s| model.prepare(s.as_ref()).ids).collect();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    for _ in 0..config.steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let w_out = g.param(head[0].clone());
        let b_out = g.param(head[1].clone());
        let mut rows = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::new();
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ids = &prepared[order[cursor]];
            cursor += 1;
            let mut masked = ids.clone();
            let mut positions: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < config.mask_prob).collect();
            if positions.is_empty() {
                positions.push(rng.random_range(0..ids.len()));
            }
            for &p in &positions {
                masked[p] = Vocabulary::MASK_ID;
                targets.push(ids[p]);
            }
            let states = model.forward(&mut g, &bound, &masked, masked.len())?;
            let last = *states.last().expect("at least one layer");
            rows.push(g.gather(last, &positions)?);
        }
        let hidden = g.concat_rows(&rows)?;
        let logits = g.matmul(hidden, w_out)?;
        let logits = g.add_row(logits, b_out)?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let grads = g.backward(loss)?;

        let mut grad_list = bound.grads(&grads);
        grad_list.push(grads.wrt(w_out));
        grad_list.push(grads.wrt(b_out));
        trainer.step(&mut all, &grad_list)?;
        model.params_mut().clone_from_slice(&all[..n_model]);
        head.clone_from_slice(&all[n_model..]);
    }
    Ok(model)
}
