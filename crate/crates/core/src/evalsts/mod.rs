//! STS evaluation: data loading, similarity scoring and Pearson/Spearman reports.

mod correlation;
mod report;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

pub use correlation::{fractional_ranks, pearson, spearman};
pub use report::{CorrelationReport, ReportMetadata, TaskCorrelation};

use crate::encoder::{EncoderModel, Embedding, PoolingSpec};
use crate::error::{Error, Result};
use crate::flow::{flow_score_with, CouplingFlow, FlowScoring};
use crate::objectives::EnsembleSpec;

pub const GOLD_MAX: f64 = 5.0;

static ZERO_NORM_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that hit a zero-norm vector in this process.
pub fn zero_norm_warnings() -> u64 {
    ZERO_NORM_WARNINGS.load(Ordering::Relaxed)
}

/// `dot(u, v) / (|u| |v|)`, or 0 (with a warning) when either norm is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of dims {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        ZERO_NORM_WARNINGS.fetch_add(1, Ordering::Relaxed);
        warn!("cosine of a zero-norm vector; scoring as 0");
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Two sentences with a gold similarity in `[0, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub sentence_1: String,
    pub sentence_2: String,
    pub gold: f64,
}

impl ScoredPair {
    pub fn new(sentence_1: impl Into<String>, sentence_2: impl Into<String>, gold: f64) -> Result<Self> {
        if !(0.0..=GOLD_MAX).contains(&gold) {
            return Err(Error::invalid(format!("gold score {gold} outside [0, 5]")));
        }
        Ok(ScoredPair {
            sentence_1: sentence_1.into(),
            sentence_2: sentence_2.into(),
            gold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsTask {
    pub name: String,
    pub pairs: Vec<ScoredPair>,
    pub split: Split,
}

impl StsTask {
    pub fn new(name: impl Into<String>, pairs: Vec<ScoredPair>, split: Split) -> Result<Self> {
        let name = name.into();
        if pairs.is_empty() {
            return Err(Error::invalid(format!("task {name} has no pairs")));
        }
        Ok(StsTask { name, pairs, split })
    }

    pub fn golds(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.gold).collect()
    }

    /// Distinct sentences in first-seen order.
    pub fn sentences(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for s in [&p.sentence_1, &p.sentence_2] {
                if seen.insert(s.clone()) {
                    out.push(s.clone());
                }
            }
        }
        out
    }
}

/// A parsed task plus the lines that were skipped.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub task: StsTask,
    pub skipped: Vec<String>,
}

/// Parses `sentence1 TAB sentence2 TAB gold` lines. `#` lines are comments; CRLF is accepted.
pub fn parse_sts_tsv(text: &str, name: &str, split: Split) -> Result<LoadedTask> {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            skipped.push(format!("line {}: expected 3 columns, found {}", lineno + 1, cols.len()));
            continue;
        }
        let gold: f64 = match cols[2].trim().parse() {
            Ok(g) => g,
            Err(_) => {
                skipped.push(format!("line {}: gold {:?} is not a number", lineno + 1, cols[2]));
                continue;
            }
        };
        match ScoredPair::new(cols[0], cols[1], gold) {
            Ok(p) => pairs.push(p),
            Err(_) => skipped.push(format!("line {}: gold {gold} outside [0, 5]", lineno + 1)),
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "task {name}: no valid lines ({} skipped)",
            skipped.len()
        )));
    }
    for s in &skipped {
        warn!("task {name}: {s}");
    }
    Ok(LoadedTask {
        task: StsTask::new(name, pairs, split)?,
        skipped,
    })
}

/// Loads one STS file; the task is named after the file stem.
pub fn load_sts_tsv(path: &Path, split: Split) -> Result<LoadedTask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string();
    parse_sts_tsv(&text, &name, split).map_err(|e| Error::data(path, e.to_string()))
}

/// Loads every `*.tsv` in a directory, sorted by file name.
pub fn load_task_dir(dir: &Path, split: Split) -> Result<Vec<StsTask>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::data(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(dir, "no .tsv task files"));
    }
    paths.iter().map(|p| load_sts_tsv(p, split).map(|l| l.task)).collect()
}

/// Anything that maps a sentence to an embedding.
pub trait SentenceEmbedder: Sync {
    fn embed(&self, sentence: &str) -> Result<Embedding>;
}

/// An encoder read out with a fixed pooling.
#[derive(Debug, Clone, Copy)]
pub struct PooledEncoder<'a> {
    pub model: &'a EncoderModel,
    pub pool: PoolingSpec,
}

impl SentenceEmbedder for PooledEncoder<'_> {
    fn embed(&self, sentence: &str) -> Result<Embedding> {
        self.model.encode(sentence, self.pool)
    }
}

impl SentenceEmbedder for EnsembleSpec {
    fn embed(&self, sentence: &str) -> Result<Embedding> {
        self.mean_embedding(sentence)
    }
}

/// Optional latent-space scoring.
#[derive(Debug, Clone, Copy)]
pub struct FlowScorer<'a> {
    pub flow: &'a CouplingFlow,
    pub scoring: FlowScoring,
}

/// Predicted similarity for every pair of `task`.
pub fn predict_task(embedder: &dyn SentenceEmbedder, task: &StsTask, flow: Option<FlowScorer<'_>>) -> Result<Vec<f64>> {
    let mut cache: HashMap<&str, Embedding> = HashMap::new();
    for p in &task.pairs {
        for s in [p.sentence_1.as_str(), p.sentence_2.as_str()] {
            if !cache.contains_key(s) {
                cache.insert(s, embedder.embed(s)?);
            }
        }
    }
    task.pairs
        .iter()
        .map(|p| {
            let (a, b) = (&cache[p.sentence_1.as_str()], &cache[p.sentence_2.as_str()]);
            match flow {
                Some(f) => flow_score_with(f.flow, a, b, f.scoring),
                None => cosine(a.as_slice(), b.as_slice()),
            }
        })
        .collect()
}

/// `(pearson_x100, spearman_x100)` of predictions against gold.
pub fn evaluate_with(embedder: &dyn SentenceEmbedder, task: &StsTask, flow: Option<FlowScorer<'_>>) -> Result<(f64, f64)> {
    let wrap = |e: Error| Error::Task {
        task: task.name.clone(),
        source: Box::new(e),
    };
    let pred = predict_task(embedder, task, flow).map_err(wrap)?;
    let gold = task.golds();
    let p = pearson(&pred, &gold).map_err(wrap)?;
    let s = spearman(&pred, &gold).map_err(wrap)?;
    Ok((100.0 * p, 100.0 * s))
}

pub fn evaluate_task(
    model: &EncoderModel,
    task: &StsTask,
    pool: PoolingSpec,
    flow: Option<&CouplingFlow>,
) -> Result<(f64, f64)> {
    let scorer = flow.map(|f| FlowScorer {
        flow: f,
        scoring: FlowScoring::Cosine,
    });
    evaluate_with(&PooledEncoder { model, pool }, task, scorer)
}

/// Evaluates every task; failures are listed and the report marked partial.
pub fn evaluate_suite_with(
    embedder: &dyn SentenceEmbedder,
    tasks: &[StsTask],
    flow: Option<FlowScorer<'_>>,
    metadata: ReportMetadata,
) -> Result<CorrelationReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("evaluation suite has no tasks"));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    let mut failed = Vec::new();
    for t in tasks {
        match evaluate_with(embedder, t, flow) {
            Ok((p, s)) => rows.push(TaskCorrelation {
                task: t.name.clone(),
                pearson_x100: p,
                spearman_x100: s,
            }),
            Err(e) => {
                warn!("{e}");
                failed.push((t.name.clone(), e.to_string()));
            }
        }
    }
    Ok(CorrelationReport::new(rows, failed, metadata))
}

pub fn evaluate_suite(
    model: &EncoderModel,
    tasks: &[StsTask],
    pool: PoolingSpec,
    flow: Option<&CouplingFlow>,
) -> Result<CorrelationReport> {
    let metadata = ReportMetadata {
        model_id: String::new(),
        pool_k: pool.k(),
        flow: flow.is_some(),
        seed: None,
        truncated_sentences: count_truncated(model, tasks),
    };
    let scorer = flow.map(|f| FlowScorer {
        flow: f,
        scoring: FlowScoring::Cosine,
    });
    evaluate_suite_with(&PooledEncoder { model, pool }, tasks, scorer, metadata)
}

/// Distinct task sentences longer than the encoder's maximum length.
pub fn count_truncated(model: &EncoderModel, tasks: &[StsTask]) -> usize {
    let mut seen = std::collections::HashSet::new();
    tasks
        .iter()
        .flat_map(|t| t.pairs.iter().flat_map(|p| [&p.sentence_1, &p.sentence_2]))
        .filter(|s| seen.insert(s.as_str()))
        .filter(|s| model.prepare(s).truncated)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[2.0, 1.0], &[2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_norm_counts_warning() {
        let before = zero_norm_warnings();
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(zero_norm_warnings() > before);
    }

    #[test]
    fn parse_line_format() {
        let t = parse_sts_tsv("a cat\ta feline\t4.2\n", "t", Split::Test).unwrap();
        assert_eq!(t.task.pairs, vec![ScoredPair::new("a cat", "a feline", 4.2).unwrap()]);
    }

    #[test]
    fn out_of_range_gold_skipped() {
        let t = parse_sts_tsv("a\tb\t7.0\nc\td\t1.0\n", "t", Split::Test).unwrap();
        assert_eq!(t.task.pairs.len(), 1);
        assert_eq!(t.skipped.len(), 1);
        assert!(t.skipped[0].contains("outside"));
    }

    #[test]
    fn crlf_matches_lf() {
        let lf = parse_sts_tsv("a\tb\t1.0\nc\td\t2.5\n", "t", Split::Dev).unwrap();
        let crlf = parse_sts_tsv("a\tb\t1.0\r\nc\td\t2.5\r\n", "t", Split::Dev).unwrap();
        assert_eq!(lf.task, crlf.task);
    }

    #[test]
    fn no_valid_lines_rejected() {
        assert!(parse_sts_tsv("a\tb\t9\nbroken\n", "t", Split::Test).is_err());
        assert!(parse_sts_tsv("", "t", Split::Test).is_err());
    }
}
