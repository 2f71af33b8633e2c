//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::gradcheck;
use common::planted::planted;
use common::{brute_pearson, brute_spearman, has_ties, random_instance, random_sentences, tiny_encoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sedkit::checkpoint::load_encoder;
use sedkit::diffcore::Graph;
use sedkit::encoder::{EncoderModel, Embedding, PoolingSpec};
use sedkit::evalsts::{evaluate_suite, fractional_ranks, pearson, spearman};
use sedkit::experiments::{
    default_bounds, grid_search_lower_bound, pooling_ablation, run_pipeline, stability_study, DataBundle,
    GridSearchConfig, PipelineOutput, PipelineSpec, Stage, StabilityStudy,
};
use sedkit::flow::{fit_flow, flow_forward, flow_inverse, flow_nll, CouplingFlow, FlowConfig};
use sedkit::objectives::{ensemble_mean_embedding, sample_ct_batches, sed_loss, sed_loss_var, EnsembleSpec};
use sedkit::synthetic::{generate_world, SyntheticWorld, SyntheticWorldSpec};

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn run(number: usize, name: &str, body: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        check(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {number:>2} {name}: {} ({}; {:.1}s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        start.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn gradient_suite() -> Check {
    let results = [
        ("sed_loss", gradcheck::sed_loss_worst(gradcheck::SEEDS)),
        ("ct_loss", gradcheck::ct_loss_worst(gradcheck::SEEDS)),
        ("nli_siamese_loss", gradcheck::nli_siamese_loss_worst(gradcheck::SEEDS)),
        ("sts_regression_loss", gradcheck::sts_regression_loss_worst(gradcheck::SEEDS)),
        ("flow_nll", gradcheck::flow_nll_worst(gradcheck::SEEDS)),
    ];
    let pass = results.iter().all(|(_, w)| *w < gradcheck::MAX_REL);
    let detail = results
        .iter()
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(pass, format!("{} seeds each, max rel err: {detail}", gradcheck::SEEDS))
}

fn correlation_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut tied, mut worst) = (0usize, 0.0f64);
    for i in 0..1000 {
        let (xs, ys) = random_instance(&mut rng, i % 2 == 0);
        if has_ties(&xs) || has_ties(&ys) {
            tied += 1;
        }
        worst = worst
            .max((pearson(&xs, &ys).unwrap() - brute_pearson(&xs, &ys)).abs())
            .max((spearman(&xs, &ys).unwrap() - brute_spearman(&xs, &ys)).abs());
    }
    let hand_pearson = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let hand_ranks = fractional_ranks(&[1.0, 2.0, 2.0, 3.0]);
    let hand_spearman = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let hand_ok = hand_pearson == 0.5
        && hand_ranks == [1.0, 2.5, 2.5, 4.0]
        && hand_spearman == pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    check(
        worst < 1e-12 && tied >= 300 && hand_ok,
        format!("1000 instances, {tied} with ties, max |diff| {worst:.1e}, hand cases exact: {hand_ok}"),
    )
}

fn fixed_points() -> Check {
    let mut single_exact = true;
    for seed in 0..5 {
        let m = tiny_encoder(2, seed);
        for pool in PoolingSpec::all() {
            let ens = EnsembleSpec::new(vec![m.clone()], pool).unwrap();
            for s in random_sentences(seed, 5) {
                single_exact &= ensemble_mean_embedding(&ens, &s).unwrap() == m.encode(&s, pool).unwrap();
            }
        }
    }

    let t = Embedding::new(vec![0.25, -1.0, 3.5, 0.0]);
    let mut zero_iff_equal = sed_loss(&t, &t).unwrap() == 0.0;
    for i in 0..4 {
        let mut v = t.as_slice().to_vec();
        v[i] += 1e-7;
        zero_iff_equal &= sed_loss(&t, &Embedding::new(v)).unwrap() > 0.0;
    }

    let members: Vec<EncoderModel> = (0..3).map(|s| tiny_encoder(2, 10 + s)).collect();
    let student = tiny_encoder(2, 20);
    let mut g = Graph::new();
    let bound: Vec<_> = members.iter().map(|m| m.bind(&mut g, true)).collect();
    let outs: Vec<_> = members
        .iter()
        .zip(&bound)
        .map(|(m, b)| m.embed_var(&mut g, b, "alpha beta gamma", PoolingSpec::FINAL).unwrap())
        .collect();
    let mut sum = outs[0];
    for &o in &outs[1..] {
        sum = g.add(sum, o).unwrap();
    }
    let target = g.scale(sum, 1.0 / 3.0);
    let sb = student.bind(&mut g, true);
    let s = student.embed_var(&mut g, &sb, "alpha beta gamma", PoolingSpec::FINAL).unwrap();
    let loss = sed_loss_var(&mut g, target, s).unwrap();
    let grads = g.backward(loss).unwrap();
    let members_zero = bound
        .iter()
        .flat_map(|b| b.vars().iter().copied())
        .all(|v| grads.wrt(v).data().iter().all(|x| *x == 0.0));
    let student_moves = sb.grads(&grads).iter().any(|t| t.data().iter().any(|x| *x != 0.0));

    check(
        single_exact && zero_iff_equal && members_zero && student_moves,
        format!(
            "N=1 mean exact: {single_exact}, loss zero iff equal: {zero_iff_equal}, member grads zero: {members_zero}, student grads non-zero: {student_moves}"
        ),
    )
}

fn flow_suite() -> Check {
    let mut inv: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 1.5).unwrap();
    for seed in 0..20 {
        let dim = 2 + (seed % 15) as usize;
        let flow = CouplingFlow::random(dim, 4, 8, seed, 0.5).unwrap();
        for _ in 0..10 {
            let x = Embedding::new((0..dim).map(|_| normal.sample(&mut rng)).collect());
            let (z, _) = flow_forward(&flow, &x).unwrap();
            let back = flow_inverse(&flow, &z).unwrap();
            for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
                inv = inv.max((a - b).abs());
            }
        }
    }

    let mut logdet: f64 = 0.0;
    for seed in 0..20 {
        let dim = 2 + (seed % 7) as usize;
        let flow = CouplingFlow::random(dim, 4, 6, seed, 0.4).unwrap();
        for _ in 0..5 {
            let x = Embedding::new((0..dim).map(|_| normal.sample(&mut rng)).collect());
            let (_, ld) = flow_forward(&flow, &x).unwrap();
            logdet = logdet.max((ld - common::brute_log_det(&flow, &x)).abs());
        }
    }

    let dim = 6;
    let shifted = Normal::new(5.0, 1.0).unwrap();
    let data: Vec<Embedding> = (0..256)
        .map(|_| Embedding::new((0..dim).map(|_| shifted.sample(&mut rng)).collect()))
        .collect();
    let identity = CouplingFlow::identity(dim, 4, 12, 1).unwrap();
    let config = FlowConfig {
        epochs: 30,
        lr: 1e-2,
        ..FlowConfig::default()
    };
    let before = flow_nll(&identity, &data).unwrap();
    let after = flow_nll(&fit_flow(&identity, &data, &config, 3).unwrap().flow, &data).unwrap();

    check(
        inv < 1e-9 && logdet < 1e-5 && after < before,
        format!("inversion {inv:.1e}, log-det vs Jacobian {logdet:.1e}, NLL {before:.3} -> {after:.3}"),
    )
}

/// Both runs of the full default pipeline on the default synthetic world.
struct DeskRuns<'a> {
    world: &'a SyntheticWorld,
    spec: PipelineSpec,
    dirs: [tempfile::TempDir; 2],
    outputs: Vec<PipelineOutput>,
}

fn desk_runs(world: &SyntheticWorld) -> DeskRuns<'_> {
    let spec = PipelineSpec {
        stages: vec![Stage::Pretrain, Stage::Ct, Stage::Sed, Stage::Flow],
        ..PipelineSpec::default()
    };
    let data = DataBundle {
        corpus: world.corpus.clone(),
        nli: Vec::new(),
        tasks: world.test_tasks.clone(),
        base: None,
        input_hashes: Default::default(),
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs = dirs
        .iter()
        .map(|d| run_pipeline(&spec, &data, Some(d.path())).unwrap())
        .collect();
    DeskRuns {
        world,
        spec,
        dirs,
        outputs,
    }
}

fn teachers(runs: &DeskRuns) -> EnsembleSpec {
    EnsembleSpec::new(runs.outputs[0].members.clone(), runs.spec.target_pool).unwrap()
}

fn base_model(runs: &DeskRuns) -> EncoderModel {
    load_encoder(&runs.dirs[0].path().join("00-pretrain.ckpt")).unwrap()
}

const STUDENT_SEEDS: [u64; 3] = [11, 12, 13];

fn study(runs: &DeskRuns) -> StabilityStudy {
    stability_study(
        &teachers(runs),
        &base_model(runs),
        &runs.world.corpus,
        &runs.spec.sed,
        &STUDENT_SEEDS,
        &runs.world.test_tasks,
        runs.spec.eval_pool,
    )
    .unwrap()
}

fn sed_relational(study: &StabilityStudy) -> Check {
    let (t, s) = (&study.members, &study.students);
    let a = s.mean >= t.mean - 1.0;
    let b = s.std <= t.std;
    check(
        a && b && t.values.len() == 4 && s.values.len() == 3,
        format!(
            "(a) student mean {:.2} vs teacher mean {:.2} - 1.0: {a}; (b) student std {:.2} <= teacher std {:.2}: {b}",
            s.mean, t.mean, s.std, t.std
        ),
    )
}

fn full_ensemble(study: &StabilityStudy) -> Check {
    let full = study.full_ensemble.values[0];
    check(
        full >= study.members.mean,
        format!("full ensemble {full:.2} vs member mean {:.2}", study.members.mean),
    )
}

fn grid_search() -> Check {
    let pool = PoolingSpec::LAST_TWO;
    let p = planted(tiny_encoder(2, 3), 0.5, pool, 64, 200, 1);
    let config = GridSearchConfig {
        bounds: default_bounds(),
        ..GridSearchConfig::default()
    };
    let full = grid_search_lower_bound(&p.model, &p.train, &p.dev, &config, 0).unwrap();
    let single_config = GridSearchConfig {
        bounds: vec![0.3],
        ..GridSearchConfig::default()
    };
    let single = grid_search_lower_bound(&p.model, &p.train, &p.dev, &single_config, 0).unwrap();
    let best = full.summaries.iter().find(|s| s.bound == full.selected).unwrap();
    check(
        full.bounds.len() == 20 && full.selected == 0.5 && single.selected == 0.3,
        format!(
            "20 bounds, selected {} (mean dev Spearman {:.2}); single candidate selects {}",
            full.selected, best.mean, single.selected
        ),
    )
}

fn checkpoint_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt") || p.file_name().is_some_and(|n| n == "report.csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(runs: &DeskRuns) -> Check {
    let a = checkpoint_files(runs.dirs[0].path());
    let b = checkpoint_files(runs.dirs[1].path());
    let ckpts = a.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    let same_files = a == b;
    let same_report = runs.outputs[0].report == runs.outputs[1].report;
    let records = |o: &PipelineOutput| -> Vec<(usize, Option<usize>, String, Option<std::ffi::OsString>)> {
        o.manifest
            .checkpoints
            .iter()
            .map(|c| (c.stage_index, c.member, c.sha256.clone(), c.path.as_ref().and_then(|p| p.file_name()).map(Into::into)))
            .collect()
    };
    let same_hashes = records(&runs.outputs[0]) == records(&runs.outputs[1]);
    check(
        same_files && same_report && same_hashes && ckpts >= 6,
        format!(
            "{ckpts} checkpoints bit-identical: {same_files}, reports equal: {same_report}, manifest hashes equal: {same_hashes}, avg Spearman {:.2}",
            runs.outputs[0].report.avg_spearman()
        ),
    )
}

fn pooling(runs: &DeskRuns) -> Check {
    let mut models = vec![("base".to_string(), base_model(runs))];
    models.push(("teacher-0".to_string(), runs.outputs[0].members[0].clone()));
    models.push(("student".to_string(), runs.outputs[0].model.clone()));
    let tasks = &runs.world.test_tasks;
    let table = pooling_ablation(&models, tasks).unwrap();
    let mut cells = 0;
    let mut equal = table.rows.len() == models.len();
    for ((name, row), (model_name, model)) in table.rows.iter().zip(&models) {
        equal &= name == model_name;
        for (cell, pool) in row.iter().zip(PoolingSpec::all()) {
            cells += 1;
            equal &= *cell == evaluate_suite(model, tasks, pool, None).unwrap().avg_spearman();
        }
    }
    check(equal && cells == 9, format!("{cells} cells (k=1,2,3 x 3 models) equal standalone evaluation: {equal}"))
}

fn ct_batches(world: &SyntheticWorld) -> Check {
    let mut sampler = sample_ct_batches(&world.corpus, 7, 16, 99).unwrap();
    let mut bad = 0;
    for _ in 0..1000 {
        let batch = sampler.next().unwrap();
        if batch.len() != 16 || batch.composition() != (2, 14) {
            bad += 1;
        }
    }
    check(bad == 0, format!("1000 batches of 16, {bad} without exactly 2 positives and 14 negatives"))
}

fn main() {
    let mut results = vec![
        run(1, "gradient suite", gradient_suite),
        run(2, "correlation oracle", correlation_oracle),
        run(3, "ensemble and loss fixed points", fixed_points),
        run(4, "flow suite", flow_suite),
    ];

    let world = generate_world(&SyntheticWorldSpec::default()).expect("default world generates");
    let start = Instant::now();
    let runs = catch_unwind(|| desk_runs(&world));
    if runs.is_ok() {
        println!("  (two default pipeline runs took {:.1}s)", start.elapsed().as_secs_f64());
    }
    match &runs {
        Ok(runs) => {
            let study = catch_unwind(AssertUnwindSafe(|| study(runs)));
            match &study {
                Ok(st) => {
                    for g in st.groups() {
                        println!(
                            "  {}: values {:?} mean {:.2} std {:.2}",
                            g.group,
                            g.values.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
                            g.mean,
                            g.std
                        );
                    }
                    results.push(run(5, "desk-scale SED stability", || sed_relational(st)));
                    results.push(run(6, "full ensemble beats member mean", || full_ensemble(st)));
                }
                Err(_) => {
                    results.push(run(5, "desk-scale SED stability", || check(false, "stability study failed")));
                    results.push(run(6, "full ensemble beats member mean", || check(false, "stability study failed")));
                }
            }
            results.push(run(7, "grid search planted optimum", grid_search));
            results.push(run(8, "pipeline determinism", || determinism(runs)));
            results.push(run(9, "pooling ablation", || pooling(runs)));
        }
        Err(_) => {
            for (n, name) in [(5, "desk-scale SED stability"), (6, "full ensemble beats member mean")] {
                results.push(run(n, name, || check(false, "pipeline failed")));
            }
            results.push(run(7, "grid search planted optimum", grid_search));
            for (n, name) in [(8, "pipeline determinism"), (9, "pooling ablation")] {
                results.push(run(n, name, || check(false, "pipeline failed")));
            }
        }
    }
    results.push(run(10, "CT batch composition", || ct_batches(&world)));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
