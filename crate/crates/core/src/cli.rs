//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{load_encoder, load_flow, save_checkpoint};
use crate::config::{load_data_bundle, load_train_pairs, sample_corpus, RunConfig};
use crate::encoder::{pretrain_base, EncoderModel, PoolingSpec};
use crate::error::{Error, Result};
use crate::evalsts::{load_sts_tsv, load_task_dir, Split};
use crate::experiments::{
    fit_flow_on_tasks, grid_search_lower_bound, pooling_ablation, run_pipeline_with_config, stability_csv,
    stability_study, train_sed, train_supervised_with_early_stopping, Stage,
};
use crate::objectives::{load_corpus, load_nli_tsv, train_ct, train_nli, EnsembleSpec, RegressionTargetMap};
use crate::synthetic::gen_synthetic_world;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sedkit", version, about = "Sentence ensemble distillation toolkit")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Default directory for outputs.
    #[arg(long, global = true, env = "SEDKIT_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a vocabulary and pretrain a base encoder on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        seed: SeedArg,
        /// Checkpoint path (default: <out-dir>/base.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune an encoder with the siamese NLI objective.
    TrainNli {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nli: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune an encoder with contrastive tension.
    TrainCt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distil an ensemble of teacher checkpoints into a student.
    TrainSed {
        #[arg(long, num_args = 1.., required = true)]
        teachers: Vec<PathBuf>,
        /// Student initialisation checkpoint.
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sample this many corpus sentences (0 = all).
        #[arg(long)]
        sample: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a coupling flow on the embeddings of evaluation sentences.
    FitFlow {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        pool: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// STS regression with early stopping on a dev set.
    TrainSupervised {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        lower_bound: f64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the regression lower bound on a dev set.
    GridSearch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Comma-separated bounds (default: 0, 0.05, ..., 0.95).
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<f64>>,
        #[arg(long)]
        seeds_per_bound: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        /// CSV path (default: <out-dir>/grid.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a directory of STS tasks.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        flow: Option<PathBuf>,
        /// CSV path (default: <out-dir>/report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the spread of teacher and distilled-student scores.
    Stability {
        #[arg(long, num_args = 1.., required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Number of student runs; seeds are taken from the config or counted up from --seed.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average Spearman under pooling over 1, 2 and 3 final layers.
    AblatePooling {
        #[arg(long, num_args = 1.., required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus, NLI file and STS tasks.
    GenSynthetic {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        sentences_per_cluster: Option<usize>,
        /// Output directory (default: <out-dir>/synthetic).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured pipeline end to end and write a manifest.
    Run {
        /// Comma-separated stages overriding the config, e.g. pretrain,ct,sed,flow.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[command(flatten)]
        seed: SeedArg,
    },
}

struct Ctx {
    config: RunConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out_dir.join(default_name))
    }

    fn seed(&self, arg: &SeedArg) -> u64 {
        arg.seed.unwrap_or(self.config.pipeline.seed)
    }

    fn path(&self, explicit: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        explicit
            .or_else(|| configured.clone())
            .ok_or_else(|| Error::Config(format!("no {what} given (flag or data.{what} in the config)")))
    }

    fn pool(&self, k: Option<usize>) -> Result<PoolingSpec> {
        k.map_or(Ok(self.config.pipeline.eval_pool), PoolingSpec::new)
    }
}

fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    let hash = save_checkpoint(&model.clone().into(), path)?;
    println!("wrote {} (sha256 {hash})", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_teachers(paths: &[PathBuf], pool: PoolingSpec) -> Result<EnsembleSpec> {
    let members = paths.iter().map(|p| load_encoder(p)).collect::<Result<Vec<_>>>()?;
    EnsembleSpec::new(members, pool)
}

fn corpus_for(ctx: &Ctx, corpus: Option<PathBuf>, sample: Option<usize>, seed: u64) -> Result<Vec<String>> {
    let path = ctx.path(corpus, &ctx.config.data.corpus, "corpus")?;
    let n = sample.unwrap_or(ctx.config.data.corpus_sample);
    if n == 0 {
        load_corpus(&path)
    } else {
        sample_corpus(&path, n, seed, ctx.config.data.sample_with_replacement)
    }
}

fn dispatch(command: Command, ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    match command {
        Command::Pretrain {
            corpus,
            steps,
            seed,
            out,
        } => {
            let seed = ctx.seed(&seed);
            let corpus = corpus_for(ctx, corpus, None, seed)?;
            let mut pre = cfg.pipeline.pretrain.clone();
            pre.seed = seed;
            if let Some(s) = steps {
                pre.steps = s;
            }
            let model = pretrain_base(&corpus, cfg.pipeline.arch, &pre)?;
            save_model(&model, &ctx.out(out, "base.ckpt"))
        }
        Command::TrainNli { model, nli, seed, out } => {
            let base = load_encoder(&model)?;
            let data = load_nli_tsv(&ctx.path(nli, &cfg.data.nli, "nli")?)?;
            let trained = train_nli(&base, &data, &cfg.pipeline.nli, ctx.seed(&seed))?;
            save_model(&trained, &ctx.out(out, "nli.ckpt"))
        }
        Command::TrainCt {
            model,
            corpus,
            steps,
            seed,
            out,
        } => {
            let seed = ctx.seed(&seed);
            let base = load_encoder(&model)?;
            let corpus = corpus_for(ctx, corpus, None, seed)?;
            let mut ct = cfg.pipeline.ct.clone();
            if let Some(s) = steps {
                ct.steps = s;
            }
            let trained = train_ct(&base, &corpus, &ct, seed)?;
            save_model(&trained, &ctx.out(out, "ct.ckpt"))
        }
        Command::TrainSed {
            teachers,
            student,
            corpus,
            sample,
            seed,
            out,
        } => {
            let seed = ctx.seed(&seed);
            let ensemble = load_teachers(&teachers, cfg.pipeline.target_pool)?;
            let init = load_encoder(&student)?;
            let corpus = corpus_for(ctx, corpus, sample, seed)?;
            let trained = train_sed(&ensemble, &init, &corpus, &cfg.pipeline.sed, seed)?;
            save_model(&trained, &ctx.out(out, "sed.ckpt"))
        }
        Command::FitFlow {
            model,
            tasks,
            pool,
            seed,
            out,
        } => {
            let encoder = load_encoder(&model)?;
            let tasks = load_task_dir(&ctx.path(tasks, &cfg.data.tasks, "tasks")?, Split::Test)?;
            let mut spec = cfg.pipeline.clone();
            spec.eval_pool = ctx.pool(pool)?;
            let flow = fit_flow_on_tasks(&encoder, &tasks, &spec, ctx.seed(&seed))?;
            let path = ctx.out(out, "flow.ckpt");
            let hash = save_checkpoint(&flow.into(), &path)?;
            println!("wrote {} (sha256 {hash})", path.display());
            Ok(())
        }
        Command::TrainSupervised {
            model,
            train,
            dev,
            lower_bound,
            max_epochs,
            patience,
            seed,
            out,
        } => {
            let base = load_encoder(&model)?;
            let train = load_train_pairs(&ctx.path(train, &cfg.data.sts_train, "sts_train")?)?;
            let dev = load_sts_tsv(&ctx.path(dev, &cfg.data.sts_dev, "sts_dev")?, Split::Dev)?.task;
            let mut sup = cfg.supervised.clone();
            if let Some(m) = max_epochs {
                sup.max_epochs = m;
            }
            if let Some(p) = patience {
                sup.patience = p;
            }
            let map = RegressionTargetMap::new(lower_bound)?;
            let outcome = train_supervised_with_early_stopping(&base, &train, &dev, map, &sup, ctx.seed(&seed))?;
            println!(
                "best dev spearman x100 {:.2} at epoch {} (trajectory {:?})",
                outcome.best_score, outcome.best_epoch, outcome.trajectory
            );
            save_model(&outcome.best, &ctx.out(out, "supervised.ckpt"))
        }
        Command::GridSearch {
            model,
            train,
            dev,
            bounds,
            seeds_per_bound,
            seed,
            out,
        } => {
            let base = load_encoder(&model)?;
            let train = load_train_pairs(&ctx.path(train, &cfg.data.sts_train, "sts_train")?)?;
            let dev = load_sts_tsv(&ctx.path(dev, &cfg.data.sts_dev, "sts_dev")?, Split::Dev)?.task;
            let mut grid = cfg.grid.clone();
            if let Some(b) = bounds {
                grid.bounds = b;
            }
            if let Some(s) = seeds_per_bound {
                grid.seeds_per_bound = s;
            }
            let result = grid_search_lower_bound(&base, &train, &dev, &grid, ctx.seed(&seed))?;
            println!("selected lower bound {}", result.selected);
            let path = ctx.out(out, "grid.csv");
            write_text(&path, &result.to_csv())?;
            write_text(
                &path.with_extension("json"),
                &serde_json::to_string_pretty(&result).expect("grid result serializes"),
            )
        }
        Command::Evaluate {
            model,
            tasks,
            pool,
            flow,
            out,
        } => {
            let encoder = load_encoder(&model)?;
            let tasks = load_task_dir(&ctx.path(tasks, &cfg.data.tasks, "tasks")?, Split::Test)?;
            let flow = flow.map(|p| load_flow(&p)).transpose()?;
            let mut report = crate::evalsts::evaluate_suite(&encoder, &tasks, ctx.pool(pool)?, flow.as_ref())?;
            report.metadata.model_id = model.display().to_string();
            let path = ctx.out(out, "report.csv");
            report.write(&path)?;
            print!("{}", report.to_csv());
            if report.is_partial() {
                return Err(Error::invalid(format!("partial report; failed tasks: {:?}", report.failed)));
            }
            Ok(())
        }
        Command::Stability {
            teachers,
            student,
            corpus,
            tasks,
            runs,
            seed,
            out,
        } => {
            let seed = ctx.seed(&seed);
            let ensemble = load_teachers(&teachers, cfg.pipeline.target_pool)?;
            let init = load_encoder(&student)?;
            let corpus = corpus_for(ctx, corpus, None, seed)?;
            let tasks = load_task_dir(&ctx.path(tasks, &cfg.data.tasks, "tasks")?, Split::Test)?;
            let seeds: Vec<u64> = match runs {
                Some(n) => (0..n as u64).map(|i| seed.wrapping_add(i)).collect(),
                None => cfg.stability.student_seeds.clone(),
            };
            let study = stability_study(
                &ensemble,
                &init,
                &corpus,
                &cfg.pipeline.sed,
                &seeds,
                &tasks,
                cfg.pipeline.eval_pool,
            )?;
            let csv = stability_csv(&study.groups().map(Clone::clone));
            print!("{csv}");
            write_text(&ctx.out(out, "stability.csv"), &csv)
        }
        Command::AblatePooling { model, tasks, out } => {
            let models = model
                .iter()
                .map(|p| Ok((p.display().to_string(), load_encoder(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let tasks = load_task_dir(&ctx.path(tasks, &cfg.data.tasks, "tasks")?, Split::Test)?;
            let table = pooling_ablation(&models, &tasks)?;
            print!("{}", table.to_csv());
            write_text(&ctx.out(out, "pooling.csv"), &table.to_csv())
        }
        Command::GenSynthetic {
            seed,
            clusters,
            sentences_per_cluster,
            out,
        } => {
            let mut spec = cfg.synthetic.clone();
            if let Some(s) = seed.seed {
                spec.seed = s;
            }
            if let Some(c) = clusters {
                spec.clusters = c;
            }
            if let Some(n) = sentences_per_cluster {
                spec.sentences_per_cluster = n;
            }
            let dir = ctx.out(out, "synthetic");
            let paths = gen_synthetic_world(&spec, &dir)?;
            println!("wrote synthetic world to {}", dir.display());
            info!("{paths:?}");
            Ok(())
        }
        Command::Run { stages, seed } => {
            let mut config = cfg.clone();
            if let Some(list) = stages {
                config.pipeline.stages = list.iter().map(|s| s.parse::<Stage>()).collect::<Result<_>>()?;
            }
            if let Some(s) = seed.seed {
                config.pipeline.seed = s;
            }
            config.output_dir = Some(ctx.out_dir.clone());
            let resolved = config.to_toml();
            let data = load_data_bundle(&config.data, &config.pipeline, config.pipeline.seed)?;
            std::fs::create_dir_all(&ctx.out_dir)?;
            std::fs::write(ctx.out_dir.join("run-config.toml"), &resolved)?;
            let output = run_pipeline_with_config(&config.pipeline, &data, Some(&ctx.out_dir), Some(resolved))
                .map_err(|e| {
                    eprintln!("partial manifest kept at {}", ctx.out_dir.join("manifest.json").display());
                    Error::Stage {
                        index: e.stage_index,
                        stage: e.stage.to_string(),
                        source: Box::new(e.source),
                    }
                })?;
            print!("{}", output.report.to_csv());
            println!("manifest: {}", ctx.out_dir.join("manifest.json").display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let config = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let out_dir = cli
        .out_dir
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("sedkit-out"));
    let ctx = Ctx { config, out_dir };
    match dispatch(cli.command, &ctx) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            exit_code(&e)
        }
    }
}
