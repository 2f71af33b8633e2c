use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sed::{train_sed, SedConfig};
use super::stats::StabilityReport;
use crate::encoder::{EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::evalsts::{evaluate_suite, evaluate_suite_with, CorrelationReport, ReportMetadata, StsTask};
use crate::objectives::EnsembleSpec;

/// Scores every sentence with the ensemble-mean embedding under `pool`.
pub fn full_ensemble_predict(ensemble: &EnsembleSpec, tasks: &[StsTask], pool: PoolingSpec) -> Result<CorrelationReport> {
    let metadata = ReportMetadata {
        model_id: format!("ensemble-of-{}", ensemble.len()),
        pool_k: pool.k(),
        ..ReportMetadata::default()
    };
    evaluate_suite_with(&ensemble.with_pool(pool), tasks, None, metadata)
}

/// The three groups compared in the stability study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStudy {
    pub members: StabilityReport,
    pub full_ensemble: StabilityReport,
    pub students: StabilityReport,
}

impl StabilityStudy {
    pub fn groups(&self) -> [&StabilityReport; 3] {
        [&self.members, &self.full_ensemble, &self.students]
    }
}

fn average_spearman(report: Result<CorrelationReport>) -> Result<f64> {
    let r = report?;
    if r.is_partial() {
        return Err(Error::invalid(format!("tasks failed: {:?}", r.failed)));
    }
    Ok(r.avg_spearman())
}

fn split_runs(label: &str, results: Vec<Result<f64>>) -> (Vec<f64>, usize) {
    let mut ok = Vec::new();
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                warn!("{label} run {i} failed and is excluded: {e}");
                failed += 1;
            }
        }
    }
    (ok, failed)
}

/// Trains one student per seed from `student_init` and compares the spread of
/// their average Spearman with that of the ensemble members.
pub fn stability_study<S: AsRef<str> + Sync>(
    ensemble: &EnsembleSpec,
    student_init: &EncoderModel,
    corpus: &[S],
    sed: &SedConfig,
    student_seeds: &[u64],
    tasks: &[StsTask],
    eval_pool: PoolingSpec,
) -> Result<StabilityStudy> {
    if student_seeds.len() < 2 {
        return Err(Error::invalid("a stability study needs at least 2 runs"));
    }
    let member_scores: Vec<Result<f64>> = ensemble
        .members()
        .par_iter()
        .map(|m| average_spearman(evaluate_suite(m, tasks, eval_pool, None)))
        .collect();
    let (member_vals, member_failed) = split_runs("member", member_scores);
    let full = average_spearman(full_ensemble_predict(ensemble, tasks, eval_pool))?;
    let student_scores: Vec<Result<f64>> = student_seeds
        .par_iter()
        .map(|&seed| {
            let student = train_sed(ensemble, student_init, corpus, sed, seed)?;
            average_spearman(evaluate_suite(&student, tasks, eval_pool, None))
        })
        .collect();
    let (student_vals, student_failed) = split_runs("student", student_scores);
    if student_vals.is_empty() {
        return Err(Error::invalid("every distillation run failed"));
    }
    Ok(StabilityStudy {
        members: StabilityReport::from_values("ensemble members", member_vals, member_failed),
        full_ensemble: StabilityReport::from_values("full ensemble", vec![full], 0),
        students: StabilityReport::from_values("distillation learners", student_vals, student_failed),
    })
}
