//! Siamese STS regression of cosine similarity onto a bounded target range.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, LrSchedule, OptimizerKind, Var};
use crate::encoder::{BoundEncoder, EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::evalsts::{cosine, ScoredPair, GOLD_MAX};
use crate::train::Trainer;

/// Affine map from gold `[0, 5]` onto `[lower_bound, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTargetMap {
    lower_bound: f64,
}

impl RegressionTargetMap {
    pub const UPPER_BOUND: f64 = 1.0;

    pub fn new(lower_bound: f64) -> Result<Self> {
        if !(0.0..Self::UPPER_BOUND).contains(&lower_bound) {
            return Err(Error::invalid(format!("lower bound {lower_bound} outside [0, 1)")));
        }
        Ok(RegressionTargetMap { lower_bound })
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    /// Target cosine for `gold`; hits both endpoints exactly.
    pub fn target(&self, gold: f64) -> f64 {
        let f = gold / GOLD_MAX;
        (1.0 - f) * self.lower_bound + f * Self::UPPER_BOUND
    }
}

/// Cosine similarity of two `[1, d]` vars.
pub fn cosine_var(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let uv = g.mul(u, v)?;
    let dot = g.sum(uv);
    let uu = g.square(u);
    let nu = g.sum(uu);
    let vv = g.square(v);
    let nv = g.sum(vv);
    let prod = g.mul(nu, nv)?;
    let denom = g.sqrt(prod);
    g.div(dot, denom)
}

/// Graph form of the regression loss averaged over `pairs`.
pub fn sts_regression_loss_var(
    g: &mut Graph,
    model: &EncoderModel,
    bound: &BoundEncoder,
    pairs: &[ScoredPair],
    map: RegressionTargetMap,
    pool: PoolingSpec,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty regression batch"));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let u = model.embed_var(g, bound, &p.sentence_1, pool)?;
        let v = model.embed_var(g, bound, &p.sentence_2, pool)?;
        let c = cosine_var(g, u, v)?;
        let t = g.constant(crate::diffcore::Tensor::scalar(map.target(p.gold)));
        let d = g.sub(c, t)?;
        terms.push(g.square(d));
    }
    let all = g.concat_cols(&terms)?;
    Ok(g.mean(all))
}

/// `(cos(u, v) - target(gold))^2` for one pair.
pub fn sts_regression_loss(model: &EncoderModel, pair: &ScoredPair, map: RegressionTargetMap, pool: PoolingSpec) -> Result<f64> {
    let u = model.encode(&pair.sentence_1, pool)?;
    let v = model.encode(&pair.sentence_2, pool)?;
    let c = cosine(u.as_slice(), v.as_slice())?;
    let d = c - map.target(pair.gold);
    Ok(d * d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub pool: PoolingSpec,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            epochs: 4,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            pool: PoolingSpec::LAST_TWO,
        }
    }
}

/// Epoch-at-a-time regression training, so callers can evaluate between epochs.
#[derive(Debug)]
pub struct RegressionRun<'a> {
    model: EncoderModel,
    trainer: Trainer,
    pairs: &'a [ScoredPair],
    map: RegressionTargetMap,
    config: RegressionConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epochs_done: usize,
}

impl<'a> RegressionRun<'a> {
    /// `schedule_epochs` sets the length of the learning-rate schedule.
    pub fn new(
        base: &EncoderModel,
        pairs: &'a [ScoredPair],
        map: RegressionTargetMap,
        config: &RegressionConfig,
        schedule_epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no regression training pairs"));
        }
        let bs = config.batch_size.max(1);
        let total = (pairs.len().div_ceil(bs) * schedule_epochs.max(1)) as u64;
        let model = base.clone();
        let trainer = Trainer::new(
            OptimizerKind::adam(),
            LrSchedule::warmup(config.lr, config.warmup_fraction, total),
            model.params(),
        );
        Ok(RegressionRun {
            model,
            trainer,
            pairs,
            map,
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..pairs.len()).collect(),
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn into_model(self) -> EncoderModel {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One shuffled pass; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        self.order.shuffle(&mut self.rng);
        let bs = self.config.batch_size.max(1);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in self.order.chunks(bs) {
            let batch: Vec<ScoredPair> = chunk.iter().map(|&i| self.pairs[i].clone()).collect();
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let loss = sts_regression_loss_var(&mut g, &self.model, &bound, &batch, self.map, self.config.pool)?;
            total += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            let grad_list = bound.grads(&grads);
            self.trainer.step(self.model.params_mut(), &grad_list)?;
        }
        self.epochs_done += 1;
        Ok(total / batches as f64)
    }
}

/// Fixed-epoch regression training.
pub fn train_sts_regression(
    base: &EncoderModel,
    pairs: &[ScoredPair],
    map: RegressionTargetMap,
    config: &RegressionConfig,
    seed: u64,
) -> Result<EncoderModel> {
    let mut run = RegressionRun::new(base, pairs, map, config, config.epochs, seed)?;
    for _ in 0..config.epochs {
        run.run_epoch()?;
    }
    Ok(run.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_map_examples() {
        let m0 = RegressionTargetMap::new(0.0).unwrap();
        assert_eq!(m0.target(5.0), 1.0);
        let m4 = RegressionTargetMap::new(0.4).unwrap();
        assert_eq!(m4.target(0.0), 0.4);
        assert_eq!(m4.target(5.0), 1.0);
        assert!((m4.target(2.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn endpoints_exact_for_all_grid_bounds() {
        for i in 0..20 {
            let lb = i as f64 * 0.05;
            let m = RegressionTargetMap::new(lb).unwrap();
            assert_eq!(m.target(0.0), lb);
            assert_eq!(m.target(5.0), 1.0);
        }
    }

    #[test]
    fn bound_validation() {
        assert!(RegressionTargetMap::new(1.0).is_err());
        assert!(RegressionTargetMap::new(-0.1).is_err());
    }
}
