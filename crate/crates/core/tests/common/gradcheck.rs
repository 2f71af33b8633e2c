//! Reverse-mode gradients against central finite differences of the plain
//! (graph-free) loss implementations. Each check returns the worst relative
//! error over all parameter coordinates and seeds.

use super::{random_sentences, tiny_encoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedkit::diffcore::{Graph, Tensor};
use sedkit::encoder::{EncoderModel, Embedding, PoolingSpec};
use sedkit::evalsts::ScoredPair;
use sedkit::experiments::sed_batch_loss_var;
use sedkit::flow::{flow_nll, CouplingFlow};
use sedkit::objectives::{
    ct_loss, ct_loss_var, nli_loss_var, nli_siamese_loss, sed_loss, sts_regression_loss, sts_regression_loss_var,
    CtBatch, CtPair, LabeledNliPair, NliHead, NliLabel, RegressionTargetMap,
};

pub const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error instead.
const FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Initial encoders have unit gains and zero biases; jitter everything so
/// every parameter kind sits at a generic point.
fn generic_encoder(layers: usize, seed: u64) -> EncoderModel {
    let mut m = tiny_encoder(layers, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// Largest relative error over every coordinate of the tensors reached by `tensor`.
fn max_fd_error<M: Clone>(
    base: &M,
    analytic: &[Tensor],
    tensor: impl Fn(&mut M, usize) -> &mut Tensor,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut work = base.clone();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = tensor(&mut work, i).data()[j];
            tensor(&mut work, i).data_mut()[j] = orig + STEP;
            let up = loss(&work);
            tensor(&mut work, i).data_mut()[j] = orig - STEP;
            let down = loss(&work);
            tensor(&mut work, i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

fn encoder_tensor(m: &mut EncoderModel, i: usize) -> &mut Tensor {
    &mut m.params_mut()[i]
}

fn pool_for(seed: u64) -> PoolingSpec {
    PoolingSpec::all()[(seed % 3) as usize]
}

pub fn sed_loss_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let student = generic_encoder(2, seed);
        let sentences = random_sentences(seed + 100, 3);
        let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<Embedding> = (0..3)
            .map(|_| Embedding::new((0..4).map(|_| rng.random_range(-1.5..1.5)).collect()))
            .collect();
        let target_refs: Vec<&Embedding> = targets.iter().collect();
        let pool = pool_for(seed);

        let mut g = Graph::new();
        let bound = student.bind(&mut g, true);
        let loss = sed_batch_loss_var(&mut g, &student, &bound, &refs, &target_refs, pool).unwrap();
        let analytic = bound.grads(&g.backward(loss).unwrap());

        let oracle = |m: &EncoderModel| {
            refs.iter()
                .zip(&targets)
                .map(|(s, t)| sed_loss(t, &m.encode(s, pool).unwrap()).unwrap())
                .sum::<f64>()
                / refs.len() as f64
        };
        assert!((g.value(loss).item() - oracle(&student)).abs() < 1e-12);
        worst = worst.max(max_fd_error(&student, &analytic, encoder_tensor, oracle));
    }
    worst
}

pub fn ct_loss_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let a = generic_encoder(2, seed);
        let b = generic_encoder(2, seed + 1000);
        let s = random_sentences(seed + 200, 4);
        let pair = |x: &String, y: &String, label| CtPair {
            sentence_a: x.clone(),
            sentence_b: y.clone(),
            label,
        };
        let batch = CtBatch::new(vec![
            pair(&s[0], &s[0], 1),
            pair(&s[0], &s[1], 0),
            pair(&s[2], &s[2], 1),
            pair(&s[2], &s[3], 0),
        ])
        .unwrap();
        let pool = pool_for(seed);

        let mut g = Graph::new();
        let ba = a.bind(&mut g, true);
        let bb = b.bind(&mut g, true);
        let loss = ct_loss_var(&mut g, &a, &ba, &b, &bb, &batch, pool).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((g.value(loss).item() - ct_loss(&a, &b, &batch, pool).unwrap()).abs() < 1e-12);

        let ea = max_fd_error(&a, &ba.grads(&grads), encoder_tensor, |m| ct_loss(m, &b, &batch, pool).unwrap());
        let eb = max_fd_error(&b, &bb.grads(&grads), encoder_tensor, |m| ct_loss(&a, m, &batch, pool).unwrap());
        worst = worst.max(ea).max(eb);
    }
    worst
}

pub fn nli_siamese_loss_worst(seeds: u64) -> f64 {
    let labels = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = generic_encoder(2, seed);
        let head = NliHead::random(4, seed + 7);
        let s = random_sentences(seed + 300, 6);
        let batch: Vec<LabeledNliPair> = (0..3)
            .map(|i| LabeledNliPair {
                premise: s[2 * i].clone(),
                hypothesis: s[2 * i + 1].clone(),
                label: labels[(i + seed as usize) % 3],
            })
            .collect();
        let pool = pool_for(seed);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let w = g.param(head.weight.clone());
        let bias = g.param(head.bias.clone());
        let loss = nli_loss_var(&mut g, &model, &bound, w, bias, &batch, pool).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((g.value(loss).item() - nli_siamese_loss(&model, &head, &batch, pool).unwrap()).abs() < 1e-12);

        let em = max_fd_error(&model, &bound.grads(&grads), encoder_tensor, |m| {
            nli_siamese_loss(m, &head, &batch, pool).unwrap()
        });
        let eh = max_fd_error(
            &head,
            &[grads.wrt(w), grads.wrt(bias)],
            |h: &mut NliHead, i| if i == 0 { &mut h.weight } else { &mut h.bias },
            |h| nli_siamese_loss(&model, h, &batch, pool).unwrap(),
        );
        worst = worst.max(em).max(eh);
    }
    worst
}

pub fn sts_regression_loss_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = generic_encoder(2, seed);
        let s = random_sentences(seed + 400, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<ScoredPair> = (0..3)
            .map(|i| ScoredPair::new(s[2 * i].clone(), s[2 * i + 1].clone(), rng.random_range(0.0..=5.0)).unwrap())
            .collect();
        let map = RegressionTargetMap::new([0.0, 0.25, 0.5, 0.9][(seed % 4) as usize]).unwrap();
        let pool = pool_for(seed);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = sts_regression_loss_var(&mut g, &model, &bound, &pairs, map, pool).unwrap();
        let analytic = bound.grads(&g.backward(loss).unwrap());
        let oracle = |m: &EncoderModel| {
            pairs.iter().map(|p| sts_regression_loss(m, p, map, pool).unwrap()).sum::<f64>() / pairs.len() as f64
        };
        assert!((g.value(loss).item() - oracle(&model)).abs() < 1e-12);
        worst = worst.max(max_fd_error(&model, &analytic, encoder_tensor, oracle));
    }
    worst
}

pub fn flow_nll_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let dim = 2 + (seed % 5) as usize;
        let flow = CouplingFlow::random(dim, 4, 5, seed, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let batch: Vec<Embedding> = (0..5)
            .map(|_| Embedding::new((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let rows: Vec<f64> = batch.iter().flat_map(|e| e.as_slice().to_vec()).collect();

        let mut g = Graph::new();
        let params = flow.bind(&mut g, true);
        let x = g.constant(Tensor::matrix(batch.len(), dim, rows).unwrap());
        let loss = flow.nll_var(&mut g, &params, x).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        worst = worst.max(max_fd_error(
            &flow,
            &analytic,
            |f: &mut CouplingFlow, i| &mut f.params_mut()[i],
            |f| flow_nll(f, &batch).unwrap(),
        ));
    }
    worst
}
