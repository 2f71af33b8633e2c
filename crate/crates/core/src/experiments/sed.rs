use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, LrSchedule, OptimizerKind, Tensor, Var};
use crate::encoder::{BoundEncoder, EncoderModel, Embedding, PoolingSpec};
use crate::error::{Error, Result};
use crate::objectives::{ensemble_mean_embedding, sed_loss_var, EnsembleSpec};
use crate::train::Trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// Pooling of the student output matched against the targets.
    pub student_pool: PoolingSpec,
    /// Compute all targets once up front instead of per batch.
    pub precompute_targets: bool,
}

impl Default for SedConfig {
    fn default() -> Self {
        SedConfig {
            epochs: 3,
            batch_size: 32,
            lr: 3e-3,
            warmup_fraction: 0.1,
            student_pool: PoolingSpec::FINAL,
            precompute_targets: true,
        }
    }
}

impl SedConfig {
    /// Full-scale values: one pass, batch 32, learning rate 2e-5.
    pub fn paper_scale() -> Self {
        SedConfig {
            lr: 2e-5,
            ..SedConfig::default()
        }
    }
}

/// Ensemble-mean targets for every corpus sentence.
pub fn sed_targets<S: AsRef<str> + Sync>(ensemble: &EnsembleSpec, corpus: &[S]) -> Result<Vec<Embedding>> {
    use rayon::prelude::*;
    corpus
        .par_iter()
        .map(|s| ensemble_mean_embedding(ensemble, s.as_ref()))
        .collect()
}

fn check_student(ensemble: &EnsembleSpec, student: &EncoderModel) -> Result<()> {
    if !student.same_architecture(&ensemble.members()[0]) {
        return Err(Error::ArchitectureMismatch {
            student: student.describe(),
            teacher: ensemble.members()[0].describe(),
        });
    }
    Ok(())
}

/// Student embeddings for `sentences`, stacked into `[B, D]`.
fn student_rows(
    g: &mut Graph,
    student: &EncoderModel,
    bound: &BoundEncoder,
    sentences: &[&str],
    pool: PoolingSpec,
) -> Result<Var> {
    let rows = sentences
        .iter()
        .map(|s| student.embed_var(g, bound, s, pool))
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// Targets computed inside the graph from constant teacher weights.
fn graph_targets(g: &mut Graph, ensemble: &EnsembleSpec, sentences: &[&str]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for m in ensemble.members() {
        let bound = m.bind(g, false);
        let rows = student_rows(g, m, &bound, sentences, ensemble.pool())?;
        acc = Some(match acc {
            None => rows,
            Some(a) => g.add(a, rows)?,
        });
    }
    let sum = acc.expect("ensemble is non-empty");
    Ok(g.scale(sum, 1.0 / ensemble.len() as f64))
}

fn stacked(targets: &[&Embedding]) -> Result<Tensor> {
    let d = targets[0].dim();
    let data = targets.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
    Tensor::matrix(targets.len(), d, data)
}

/// Batch loss with precomputed targets; mean over sentences and dimensions.
pub fn sed_batch_loss_var(
    g: &mut Graph,
    student: &EncoderModel,
    bound: &BoundEncoder,
    sentences: &[&str],
    targets: &[&Embedding],
    pool: PoolingSpec,
) -> Result<Var> {
    if sentences.is_empty() || sentences.len() != targets.len() {
        return Err(Error::invalid("SED batch needs one target per sentence"));
    }
    let s = student_rows(g, student, bound, sentences, pool)?;
    let t = g.constant(stacked(targets)?);
    sed_loss_var(g, t, s)
}

/// Batch loss with targets produced on the graph from the frozen ensemble.
pub fn sed_batch_loss_on_the_fly(
    g: &mut Graph,
    ensemble: &EnsembleSpec,
    student: &EncoderModel,
    bound: &BoundEncoder,
    sentences: &[&str],
    pool: PoolingSpec,
) -> Result<Var> {
    if sentences.is_empty() {
        return Err(Error::invalid("empty SED batch"));
    }
    let t = graph_targets(g, ensemble, sentences)?;
    let s = student_rows(g, student, bound, sentences, pool)?;
    sed_loss_var(g, t, s)
}

/// Distils `ensemble` into a copy of `student` by regressing onto the mean embedding.
pub fn train_sed<S: AsRef<str> + Sync>(
    ensemble: &EnsembleSpec,
    student: &EncoderModel,
    corpus: &[S],
    config: &SedConfig,
    seed: u64,
) -> Result<EncoderModel> {
    check_student(ensemble, student)?;
    if corpus.is_empty() {
        return Err(Error::invalid("SED corpus is empty"));
    }
    let mut model = student.clone();
    if config.epochs == 0 {
        return Ok(model);
    }
    let bs = config.batch_size.max(1);
    let total = (corpus.len().div_ceil(bs) * config.epochs) as u64;
    let mut trainer = Trainer::new(
        OptimizerKind::adam(),
        LrSchedule::warmup(config.lr, config.warmup_fraction, total),
        model.params(),
    );
    let targets = if config.precompute_targets {
        Some(sed_targets(ensemble, corpus)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let sentences: Vec<&str> = chunk.iter().map(|&i| corpus[i].as_ref()).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let loss = match &targets {
                Some(all) => {
                    let t: Vec<&Embedding> = chunk.iter().map(|&i| &all[i]).collect();
                    sed_batch_loss_var(&mut g, &model, &bound, &sentences, &t, config.student_pool)?
                }
                None => sed_batch_loss_on_the_fly(&mut g, ensemble, &model, &bound, &sentences, config.student_pool)?,
            };
            let grads = g.backward(loss)?;
            trainer.step(model.params_mut(), &bound.grads(&grads))?;
        }
    }
    Ok(model)
}

/// Mean per-sentence MSE between `student` and the ensemble targets.
pub fn sed_eval_loss<S: AsRef<str> + Sync>(ensemble: &EnsembleSpec, student: &EncoderModel, sentences: &[S], pool: PoolingSpec) -> Result<f64> {
    let targets = sed_targets(ensemble, sentences)?;
    let mut total = 0.0;
    for (s, t) in sentences.iter().zip(&targets) {
        total += crate::objectives::sed_loss(t, &student.encode(s.as_ref(), pool)?)?;
    }
    Ok(total / sentences.len().max(1) as f64)
}
