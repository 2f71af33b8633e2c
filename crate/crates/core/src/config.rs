//! Run configuration, corpus sampling and data loading for command-line runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::evalsts::{load_sts_tsv, load_task_dir, Split};
use crate::experiments::{DataBundle, GridSearchConfig, PipelineSpec, SupervisedConfig};
use crate::objectives::{load_corpus, load_nli_tsv};
use crate::synthetic::SyntheticWorldSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nli: Option<PathBuf>,
    /// Directory of evaluation `*.tsv` tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sts_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sts_dev: Option<PathBuf>,
    /// Sentences sampled from the corpus; 0 keeps every line.
    pub corpus_sample: usize,
    pub sample_with_replacement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// One distillation run per seed.
    pub student_seeds: Vec<u64>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            student_seeds: vec![11, 12, 13],
        }
    }
}

/// Everything a command-line run needs. Every field has a default and
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataPaths,
    pub pipeline: PipelineSpec,
    pub supervised: SupervisedConfig,
    pub grid: GridSearchConfig,
    pub stability: StabilityConfig,
    pub synthetic: SyntheticWorldSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The resolved config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Uniform sample of `count` non-empty lines, deterministic in `seed`.
///
/// Without replacement the file must have at least `count` lines; the result
/// is then in sampled order, so `count` equal to the line count gives a
/// permutation.
pub fn sample_corpus(path: &Path, count: usize, seed: u64, with_replacement: bool) -> Result<Vec<String>> {
    let lines = load_corpus(path)?;
    sample_lines(&lines, count, seed, with_replacement).map_err(|e| Error::data(path, e.to_string()))
}

pub fn sample_lines(lines: &[String], count: usize, seed: u64, with_replacement: bool) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if with_replacement {
        if lines.is_empty() && count > 0 {
            return Err(Error::invalid("cannot sample from an empty corpus"));
        }
        return Ok((0..count).map(|_| lines[rng.random_range(0..lines.len())].clone()).collect());
    }
    if count > lines.len() {
        return Err(Error::invalid(format!(
            "asked for {count} sentences but only {} are available; enable sampling with replacement",
            lines.len()
        )));
    }
    Ok(index::sample(&mut rng, lines.len(), count)
        .into_iter()
        .map(|i| lines[i].clone())
        .collect())
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("data.{what} is not set")))
}

/// Loads the inputs a pipeline with `spec`'s stages needs, hashing every file read.
pub fn load_data_bundle(paths: &DataPaths, spec: &PipelineSpec, seed: u64) -> Result<DataBundle> {
    use crate::experiments::Stage;
    let mut hashes = BTreeMap::new();
    let corpus_path = require(&paths.corpus, "corpus")?;
    hashes.insert("corpus".to_string(), file_sha256(corpus_path)?);
    let corpus = if paths.corpus_sample == 0 {
        load_corpus(corpus_path)?
    } else {
        sample_corpus(corpus_path, paths.corpus_sample, seed, paths.sample_with_replacement)?
    };
    let nli = if spec.stages.contains(&Stage::Nli) {
        let p = require(&paths.nli, "nli")?;
        hashes.insert("nli".to_string(), file_sha256(p)?);
        load_nli_tsv(p)?
    } else {
        Vec::new()
    };
    let tasks_dir = require(&paths.tasks, "tasks")?;
    let tasks = load_task_dir(tasks_dir, Split::Test)?;
    let mut task_files: Vec<PathBuf> = std::fs::read_dir(tasks_dir)
        .map_err(|e| Error::data(tasks_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    task_files.sort();
    for f in task_files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(format!("tasks/{name}"), file_sha256(&f)?);
    }
    Ok(DataBundle {
        corpus,
        nli,
        tasks,
        base: None,
        input_hashes: hashes,
    })
}

/// Loads an STS file as training pairs.
pub fn load_train_pairs(path: &Path) -> Result<Vec<crate::evalsts::ScoredPair>> {
    Ok(load_sts_tsv(path, Split::Train)?.task.pairs)
}
