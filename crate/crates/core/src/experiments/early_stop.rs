use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evalsts::{evaluate_task, ScoredPair, StsTask};
use crate::objectives::{RegressionConfig, RegressionRun, RegressionTargetMap};

/// Result of an early-stopped run.
#[derive(Debug, Clone)]
pub struct EarlyStopOutcome<T> {
    pub best: T,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub best_score: f64,
    /// Dev score after every completed epoch.
    pub trajectory: Vec<f64>,
    pub stopped_early: bool,
}

/// Runs `epoch` until the score fails to improve for `patience` consecutive epochs.
///
/// `epoch(i)` trains epoch `i` (1-based) and returns a snapshot with its dev
/// score. The snapshot with the highest score is returned; earlier epochs win ties.
pub fn run_early_stopping<T>(
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(usize) -> Result<(T, f64)>,
) -> Result<EarlyStopOutcome<T>> {
    if max_epochs == 0 {
        return Err(Error::invalid("early stopping needs at least one epoch"));
    }
    let patience = patience.max(1);
    let mut best: Option<(T, usize, f64)> = None;
    let mut trajectory = Vec::new();
    let mut since_best = 0;
    for i in 1..=max_epochs {
        let (snapshot, score) = epoch(i)?;
        trajectory.push(score);
        let improved = best.as_ref().is_none_or(|(_, _, b)| score > *b);
        if improved {
            best = Some((snapshot, i, score));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
    }
    let stopped_early = trajectory.len() < max_epochs;
    let (best, best_epoch, best_score) = best.expect("at least one epoch ran");
    Ok(EarlyStopOutcome {
        best,
        best_epoch,
        best_score,
        trajectory,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub regression: RegressionConfig,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            regression: RegressionConfig::default(),
            max_epochs: 6,
            patience: 2,
        }
    }
}

fn check_disjoint(train: &[ScoredPair], dev: &StsTask) -> Result<()> {
    let seen: HashSet<(&str, &str)> = train
        .iter()
        .map(|p| (p.sentence_1.as_str(), p.sentence_2.as_str()))
        .collect();
    let shared = dev
        .pairs
        .iter()
        .filter(|p| {
            seen.contains(&(p.sentence_1.as_str(), p.sentence_2.as_str()))
                || seen.contains(&(p.sentence_2.as_str(), p.sentence_1.as_str()))
        })
        .count();
    if shared > 0 {
        return Err(Error::invalid(format!(
            "{shared} pairs of dev task {} also appear in the training pairs",
            dev.name
        )));
    }
    Ok(())
}

/// STS regression with per-epoch dev evaluation; returns the best-dev checkpoint.
pub fn train_supervised_with_early_stopping(
    model: &EncoderModel,
    train: &[ScoredPair],
    dev: &StsTask,
    map: RegressionTargetMap,
    config: &SupervisedConfig,
    seed: u64,
) -> Result<EarlyStopOutcome<EncoderModel>> {
    if config.max_epochs == 0 {
        return Err(Error::invalid("zero epochs configured"));
    }
    check_disjoint(train, dev)?;
    let mut run = RegressionRun::new(model, train, map, &config.regression, config.max_epochs, seed)?;
    let pool = config.regression.pool;
    run_early_stopping(config.max_epochs, config.patience, |_| {
        run.run_epoch()?;
        let (_, spearman) = evaluate_task(run.model(), dev, pool, None)?;
        Ok((run.model().clone(), spearman))
    })
}
