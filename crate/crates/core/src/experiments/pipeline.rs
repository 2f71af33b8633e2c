use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sed::{train_sed, SedConfig};
use super::derive_seed;
use crate::checkpoint::{save_checkpoint, sha256_hex, to_bytes, Artifact};
use crate::encoder::{pretrain_base, EncoderConfig, EncoderModel, Embedding, PoolingSpec, PretrainConfig};
use crate::error::{Error, Result};
use crate::evalsts::{count_truncated, evaluate_suite_with, CorrelationReport, FlowScorer, PooledEncoder, ReportMetadata, StsTask};
use crate::flow::{fit_flow, CouplingFlow, FlowConfig};
use crate::objectives::{train_ct, train_nli, CtConfig, EnsembleSpec, LabeledNliPair, NliConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Nli,
    Ct,
    Sed,
    Flow,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Nli => "nli",
            Stage::Ct => "ct",
            Stage::Sed => "sed",
            Stage::Flow => "flow",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" => Ok(Stage::Pretrain),
            "nli" => Ok(Stage::Nli),
            "ct" => Ok(Stage::Ct),
            "sed" => Ok(Stage::Sed),
            "flow" => Ok(Stage::Flow),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Ordered stages with their settings.
///
/// Stages before `Sed` run once per ensemble member, each member with its own
/// seed. `Sed` distils the members into one student started from the base
/// checkpoint; later stages act on that student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub stages: Vec<Stage>,
    /// Desk default 4; the reference setup uses 10.
    pub ensemble_size: usize,
    pub seed: u64,
    pub eval_pool: PoolingSpec,
    pub target_pool: PoolingSpec,
    pub arch: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub nli: NliConfig,
    pub ct: CtConfig,
    pub sed: SedConfig,
    pub flow: FlowConfig,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            stages: vec![Stage::Pretrain, Stage::Ct, Stage::Sed, Stage::Flow],
            ensemble_size: 4,
            seed: 0,
            eval_pool: PoolingSpec::LAST_TWO,
            target_pool: PoolingSpec::FINAL,
            arch: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            nli: NliConfig::default(),
            ct: CtConfig::default(),
            sed: SedConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self, has_base: bool) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline has no stages".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            match s {
                Stage::Pretrain if i != 0 => return Err(Error::Config("pretrain must be the first stage".into())),
                Stage::Flow if i + 1 != self.stages.len() => {
                    return Err(Error::Config("flow must be the last stage".into()))
                }
                Stage::Sed | Stage::Pretrain | Stage::Flow if !seen.insert(*s) => {
                    return Err(Error::Config(format!("stage {s} appears more than once")))
                }
                Stage::Sed if i == 0 => {
                    return Err(Error::Config("sed needs an ensemble produced by earlier stages".into()))
                }
                _ => {}
            }
        }
        if self.stages[0] != Stage::Pretrain && !has_base {
            return Err(Error::Config("without a pretrain stage a base checkpoint must be supplied".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline spec serializes")
    }
}

/// Inputs of a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct DataBundle {
    pub corpus: Vec<String>,
    pub nli: Vec<LabeledNliPair>,
    pub tasks: Vec<StsTask>,
    /// Starting checkpoint when the pipeline has no pretrain stage.
    pub base: Option<EncoderModel>,
    /// Input name to SHA-256, recorded in the manifest.
    pub input_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub stage_index: usize,
    pub stage: Stage,
    pub member: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage_index: usize,
    pub stage: Stage,
    pub member: Option<usize>,
    pub sha256: String,
    pub path: Option<PathBuf>,
}

/// Everything needed to re-run an experiment and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Resolved pipeline settings as TOML.
    pub pipeline: String,
    /// Resolved run config as TOML when started from the command line.
    pub run_config: Option<String>,
    pub stages: Vec<Stage>,
    pub completed_stages: usize,
    pub seeds: Vec<SeedRecord>,
    pub inputs: BTreeMap<String, String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub avg_pearson_x100: Option<f64>,
    pub avg_spearman_x100: Option<f64>,
    pub error: Option<String>,
}

impl Manifest {
    pub const FORMAT: &'static str = "sedkit-manifest/1";

    fn new(spec: &PipelineSpec, inputs: BTreeMap<String, String>) -> Self {
        Manifest {
            format: Self::FORMAT.into(),
            pipeline: spec.to_toml(),
            run_config: None,
            stages: spec.stages.clone(),
            completed_stages: 0,
            seeds: Vec::new(),
            inputs,
            checkpoints: Vec::new(),
            avg_pearson_x100: None,
            avg_spearman_x100: None,
            error: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// A failed run: the error plus the manifest of the stages that completed.
#[derive(Debug, thiserror::Error)]
#[error("pipeline stage {stage_index} ({stage}) failed: {source}")]
pub struct PipelineError {
    pub stage_index: usize,
    pub stage: Stage,
    pub manifest: Box<Manifest>,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final encoder: the student after `Sed`, otherwise member 0.
    pub model: EncoderModel,
    /// Encoders produced before `Sed` (the teachers), or the final chain without it.
    pub members: Vec<EncoderModel>,
    pub flow: Option<CouplingFlow>,
    pub report: CorrelationReport,
    pub manifest: Manifest,
}

struct Runner<'a> {
    spec: &'a PipelineSpec,
    data: &'a DataBundle,
    out_dir: Option<&'a Path>,
    manifest: Manifest,
}

impl Runner<'_> {
    fn record(&mut self, index: usize, stage: Stage, member: Option<usize>, artifact: Artifact) -> Result<()> {
        let (sha256, path) = match self.out_dir {
            Some(dir) => {
                let name = match member {
                    Some(m) => format!("{index:02}-{stage}-m{m}.ckpt"),
                    None => format!("{index:02}-{stage}.ckpt"),
                };
                let path = dir.join(name);
                (save_checkpoint(&artifact, &path)?, Some(path))
            }
            None => (sha256_hex(&to_bytes(&artifact)), None),
        };
        self.manifest.checkpoints.push(CheckpointRecord {
            stage_index: index,
            stage,
            member,
            sha256,
            path,
        });
        Ok(())
    }

    fn seed(&mut self, index: usize, stage: Stage, member: Option<usize>) -> u64 {
        let seed = derive_seed(self.spec.seed, index as u64, member.map_or(u64::MAX, |m| m as u64));
        self.manifest.seeds.push(SeedRecord {
            stage_index: index,
            stage,
            member,
            seed,
        });
        seed
    }

    fn save_manifest(&self) -> Result<()> {
        if let Some(dir) = self.out_dir {
            self.manifest.write(&dir.join("manifest.json"))?;
        }
        Ok(())
    }

    fn run(&mut self) -> std::result::Result<PipelineOutput, (usize, Error)> {
        let spec = self.spec;
        let data = self.data;
        let mut base = data.base.clone();
        let mut members: Vec<EncoderModel> = Vec::new();
        let mut teachers: Option<Vec<EncoderModel>> = None;
        let mut flow = None;

        for (index, &stage) in spec.stages.iter().enumerate() {
            info!("stage {index}: {stage}");
            let fail = |e: Error| (index, e);
            match stage {
                Stage::Pretrain => {
                    let seed = self.seed(index, stage, None);
                    let cfg = PretrainConfig {
                        seed,
                        ..spec.pretrain.clone()
                    };
                    let model = pretrain_base(&data.corpus, spec.arch, &cfg).map_err(fail)?;
                    self.record(index, stage, None, model.clone().into()).map_err(fail)?;
                    base = Some(model);
                }
                Stage::Nli | Stage::Ct => {
                    if members.is_empty() {
                        let b = base.as_ref().expect("validated: a base exists");
                        members = vec![b.clone(); spec.ensemble_size];
                    }
                    let seeds: Vec<u64> = (0..members.len()).map(|m| self.seed(index, stage, Some(m))).collect();
                    let trained: Result<Vec<EncoderModel>> = members
                        .par_iter()
                        .zip(&seeds)
                        .map(|(m, &seed)| match stage {
                            Stage::Nli => train_nli(m, &data.nli, &spec.nli, seed),
                            _ => train_ct(m, &data.corpus, &spec.ct, seed),
                        })
                        .collect();
                    members = trained.map_err(fail)?;
                    for (m, model) in members.clone().into_iter().enumerate() {
                        self.record(index, stage, Some(m), model.into()).map_err(fail)?;
                    }
                }
                Stage::Sed => {
                    if members.is_empty() {
                        let b = base.as_ref().expect("validated: a base exists");
                        members = vec![b.clone(); spec.ensemble_size];
                    }
                    let seed = self.seed(index, stage, None);
                    let ensemble = EnsembleSpec::new(members.clone(), spec.target_pool).map_err(fail)?;
                    let init = base.as_ref().expect("validated: a base exists");
                    let student = train_sed(&ensemble, init, &data.corpus, &spec.sed, seed).map_err(fail)?;
                    self.record(index, stage, None, student.clone().into()).map_err(fail)?;
                    teachers = Some(std::mem::replace(&mut members, vec![student]));
                }
                Stage::Flow => {
                    if members.is_empty() {
                        members = vec![base.clone().expect("validated: a base exists")];
                    }
                    let seed = self.seed(index, stage, None);
                    let fitted = fit_flow_on_tasks(&members[0], &data.tasks, spec, seed).map_err(fail)?;
                    self.record(index, stage, None, fitted.clone().into()).map_err(fail)?;
                    flow = Some(fitted);
                }
            }
            self.manifest.completed_stages = index + 1;
            self.save_manifest().map_err(fail)?;
        }

        if members.is_empty() {
            members = vec![base.expect("a pretrain stage or base produced a model")];
        }
        let model = members[0].clone();
        let last = spec.stages.len();
        let metadata = ReportMetadata {
            model_id: self
                .manifest
                .checkpoints
                .iter()
                .rev()
                .find(|c| c.stage != Stage::Flow)
                .map(|c| c.sha256[..16].to_string())
                .unwrap_or_default(),
            pool_k: spec.eval_pool.k(),
            flow: flow.is_some(),
            seed: Some(spec.seed),
            truncated_sentences: count_truncated(&model, &data.tasks),
        };
        let scorer = flow.as_ref().map(|f| FlowScorer {
            flow: f,
            scoring: spec.flow.scoring,
        });
        let report = evaluate_suite_with(
            &PooledEncoder {
                model: &model,
                pool: spec.eval_pool,
            },
            &data.tasks,
            scorer,
            metadata,
        )
        .map_err(|e| (last, e))?;
        self.manifest.avg_pearson_x100 = Some(report.avg_pearson());
        self.manifest.avg_spearman_x100 = Some(report.avg_spearman());
        self.save_manifest().map_err(|e| (last, e))?;
        if let Some(dir) = self.out_dir {
            report.write(&dir.join("report.csv")).map_err(|e| (last, e))?;
        }
        Ok(PipelineOutput {
            model,
            members: teachers.unwrap_or(members),
            flow,
            report,
            manifest: self.manifest.clone(),
        })
    }
}

/// Distinct task sentences embedded with the evaluation pooling.
pub fn task_embeddings(model: &EncoderModel, tasks: &[StsTask], pool: PoolingSpec) -> Result<Vec<Embedding>> {
    let mut seen = HashSet::new();
    let sentences: Vec<&str> = tasks
        .iter()
        .flat_map(|t| t.pairs.iter().flat_map(|p| [p.sentence_1.as_str(), p.sentence_2.as_str()]))
        .filter(|s| seen.insert(*s))
        .collect();
    sentences.par_iter().map(|s| model.encode(s, pool)).collect()
}

/// Fits a fresh flow on the embeddings of the evaluation sentences (no labels used).
pub fn fit_flow_on_tasks(model: &EncoderModel, tasks: &[StsTask], spec: &PipelineSpec, seed: u64) -> Result<CouplingFlow> {
    let embeddings = task_embeddings(model, tasks, spec.eval_pool)?;
    let hidden = if spec.flow.hidden == 0 { 2 * model.dim() } else { spec.flow.hidden };
    let init = CouplingFlow::identity(model.dim(), spec.flow.layers, hidden, seed)?;
    let fit = fit_flow(&init, &embeddings, &spec.flow, seed)?;
    info!("flow NLL {:.4} -> {:.4}", fit.initial_nll, fit.final_nll);
    Ok(fit.flow)
}

/// Runs `spec` on `data`. With `out_dir`, checkpoints, the manifest and the
/// report are written there as each stage completes.
pub fn run_pipeline(
    spec: &PipelineSpec,
    data: &DataBundle,
    out_dir: Option<&Path>,
) -> std::result::Result<PipelineOutput, PipelineError> {
    run_pipeline_with_config(spec, data, out_dir, None)
}

/// As [`run_pipeline`], also embedding the resolved run config in the manifest.
pub fn run_pipeline_with_config(
    spec: &PipelineSpec,
    data: &DataBundle,
    out_dir: Option<&Path>,
    run_config: Option<String>,
) -> std::result::Result<PipelineOutput, PipelineError> {
    let mut manifest = Manifest::new(spec, data.input_hashes.clone());
    manifest.run_config = run_config;
    if let Err(e) = spec.validate(data.base.is_some()) {
        manifest.error = Some(e.to_string());
        return Err(PipelineError {
            stage_index: 0,
            stage: spec.stages.first().copied().unwrap_or(Stage::Pretrain),
            manifest: Box::new(manifest),
            source: e,
        });
    }
    let mut runner = Runner {
        spec,
        data,
        out_dir,
        manifest,
    };
    runner.run().map_err(|(index, e)| {
        runner.manifest.error = Some(e.to_string());
        // Best effort: the original error matters more than a failed manifest write.
        let _ = runner.save_manifest();
        PipelineError {
            stage_index: index,
            stage: spec.stages.get(index).or(spec.stages.last()).copied().unwrap_or(Stage::Pretrain),
            manifest: Box::new(runner.manifest.clone()),
            source: e,
        }
    })
}
