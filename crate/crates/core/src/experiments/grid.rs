use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::summarize;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evalsts::{evaluate_task, ScoredPair, StsTask};
use crate::objectives::{train_sts_regression, RegressionConfig, RegressionTargetMap};

pub const SELECTION_RULE: &str = "max-mean-dev-spearman;ties-to-smaller-bound";

/// `{0, 0.05, ..., 0.95}`.
pub fn default_bounds() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchConfig {
    pub bounds: Vec<f64>,
    pub seeds_per_bound: usize,
    pub regression: RegressionConfig,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        GridSearchConfig {
            bounds: default_bounds(),
            seeds_per_bound: 2,
            regression: RegressionConfig::default(),
        }
    }
}

/// One trained model of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub bound: f64,
    pub seed: u64,
    pub dev_spearman_x100: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub bound: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub bounds: Vec<f64>,
    pub cells: Vec<GridCell>,
    pub summaries: Vec<BoundSummary>,
    pub selected: f64,
    pub rule: String,
}

impl GridSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# std is the population standard deviation (divide by n)\nbound,runs,mean,std,max,selected\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{:.2},{},{:.2},{:.2},{:.2},{}\n",
                s.bound,
                s.runs,
                s.mean,
                s.std,
                s.max,
                s.bound == self.selected
            ));
        }
        out
    }
}

/// Index of the highest mean; the earliest (smallest bound after sorting) wins ties.
fn select(summaries: &[BoundSummary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in summaries.iter().enumerate() {
        if s.runs == 0 || !s.mean.is_finite() {
            continue;
        }
        if best.is_none_or(|b| s.mean > summaries[b].mean) {
            best = Some(i);
        }
    }
    best
}

/// Trains `seeds_per_bound` regression models per bound and picks the bound
/// with the best mean dev Spearman.
pub fn grid_search_lower_bound(
    base: &EncoderModel,
    train: &[ScoredPair],
    dev: &StsTask,
    config: &GridSearchConfig,
    seed: u64,
) -> Result<GridSearchResult> {
    if config.bounds.is_empty() {
        return Err(Error::invalid("grid search needs at least one bound"));
    }
    if config.seeds_per_bound == 0 {
        return Err(Error::invalid("grid search needs at least one seed per bound"));
    }
    let mut bounds = config.bounds.clone();
    for &b in &bounds {
        RegressionTargetMap::new(b)?;
    }
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();

    let jobs: Vec<(f64, u64)> = bounds
        .iter()
        .flat_map(|&b| (0..config.seeds_per_bound as u64).map(move |s| (b, seed.wrapping_add(s))))
        .collect();
    let cells: Vec<GridCell> = jobs
        .par_iter()
        .map(|&(bound, seed)| {
            let score = RegressionTargetMap::new(bound)
                .and_then(|map| train_sts_regression(base, train, map, &config.regression, seed))
                .and_then(|model| evaluate_task(&model, dev, config.regression.pool, None));
            match score {
                Ok((_, spearman)) => GridCell {
                    bound,
                    seed,
                    dev_spearman_x100: Some(spearman),
                    error: None,
                },
                Err(e) => {
                    warn!("grid cell bound={bound} seed={seed} failed: {e}");
                    GridCell {
                        bound,
                        seed,
                        dev_spearman_x100: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let summaries: Vec<BoundSummary> = bounds
        .iter()
        .map(|&b| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.bound == b)
                .filter_map(|c| c.dev_spearman_x100)
                .collect();
            let (max, mean, std) = summarize(&vals);
            BoundSummary {
                bound: b,
                runs: vals.len(),
                mean,
                std,
                max,
            }
        })
        .collect();
    let idx = select(&summaries).ok_or_else(|| Error::invalid("every grid cell failed"))?;
    Ok(GridSearchResult {
        selected: summaries[idx].bound,
        bounds,
        cells,
        summaries,
        rule: SELECTION_RULE.to_string(),
    })
}
