#![allow(dead_code)]

pub mod gradcheck;
pub mod planted;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::DMatrix;
use sedkit::encoder::{EncoderConfig, EncoderModel, Embedding, Vocabulary};
use sedkit::flow::{flow_forward, CouplingFlow};

pub const WORDS: [&str; 10] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"];

pub fn tiny_config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        hidden: 4,
        heads: 2,
        ffn: 6,
        max_len: 8,
    }
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_tokens(WORDS.iter().map(|w| w.to_string())).unwrap()
}

pub fn tiny_encoder(layers: usize, seed: u64) -> EncoderModel {
    EncoderModel::init(tiny_config(layers), tiny_vocab(), seed).unwrap()
}

pub fn random_sentence<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(1..=5);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn random_sentences(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_sentence(&mut rng)).collect()
}

/// Fresh scratch directory for one test.
pub fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

/// Ranks by sorting indices, ties taking the mean of the 1-based positions they span.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && xs[order[end + 1]] == xs[order[start]] {
            end += 1;
        }
        let positions: Vec<f64> = (start..=end).map(|p| (p + 1) as f64).collect();
        let avg = positions.iter().sum::<f64>() / positions.len() as f64;
        for &i in &order[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Sample correlation from explicit covariance sums.
pub fn brute_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

pub fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(xs), &brute_ranks(ys))
}

/// Random paired samples; `tied` draws both sides from a handful of integers.
pub fn random_instance<R: Rng>(rng: &mut R, tied: bool) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(3..40);
    loop {
        let draw = |rng: &mut R| -> Vec<f64> {
            (0..n)
                .map(|_| if tied { rng.random_range(0..5) as f64 } else { rng.random_range(-10.0..10.0) })
                .collect()
        };
        let xs = draw(rng);
        let ys = draw(rng);
        let varies = |v: &[f64]| v.iter().any(|x| *x != v[0]);
        if varies(&xs) && varies(&ys) {
            return (xs, ys);
        }
    }
}

pub fn has_ties(xs: &[f64]) -> bool {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.windows(2).any(|w| w[0] == w[1])
}

/// log|det J| from a central-difference Jacobian and an LU determinant.
pub fn brute_log_det(flow: &CouplingFlow, x: &Embedding) -> f64 {
    let d = x.dim();
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut up = x.as_slice().to_vec();
        let mut down = up.clone();
        up[j] += h;
        down[j] -= h;
        let (zu, _) = flow_forward(flow, &Embedding::new(up)).unwrap();
        let (zd, _) = flow_forward(flow, &Embedding::new(down)).unwrap();
        for i in 0..d {
            jac[(i, j)] = (zu[i] - zd[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

