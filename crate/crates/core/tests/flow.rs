mod common;

use common::brute_log_det;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sedkit::encoder::Embedding;
use sedkit::flow::{fit_flow, flow_forward, flow_inverse, flow_nll, flow_score, CouplingFlow, FlowConfig};

fn random_point(rng: &mut ChaCha8Rng, dim: usize, spread: f64) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.random_range(-spread..spread)).collect())
}

#[test]
fn inversion_round_trip() {
    let mut worst: f64 = 0.0;
    for seed in 0..30 {
        let dim = 2 + (seed % 15) as usize;
        let flow = CouplingFlow::random(dim, 4, 8, seed, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let x = random_point(&mut rng, dim, 3.0);
            let (z, _) = flow_forward(&flow, &x).unwrap();
            let back = flow_inverse(&flow, &z).unwrap();
            for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    println!("max inversion error {worst:.3e}");
    assert!(worst < 1e-9);
}

#[test]
fn log_det_matches_jacobian() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let dim = 2 + (seed % 7) as usize;
        let flow = CouplingFlow::random(dim, 4, 6, seed, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        for _ in 0..5 {
            let x = random_point(&mut rng, dim, 2.0);
            let (_, ld) = flow_forward(&flow, &x).unwrap();
            worst = worst.max((ld - brute_log_det(&flow, &x)).abs());
        }
    }
    println!("max log-det error {worst:.3e}");
    assert!(worst < 1e-5);
}

#[test]
fn fitting_shifted_gaussian_lowers_nll() {
    let dim = 6;
    let normal = Normal::new(5.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Embedding> = (0..256)
        .map(|_| Embedding::new((0..dim).map(|_| normal.sample(&mut rng)).collect()))
        .collect();
    let identity = CouplingFlow::identity(dim, 4, 12, 1).unwrap();
    let config = FlowConfig {
        epochs: 30,
        lr: 1e-2,
        ..FlowConfig::default()
    };
    let fit = fit_flow(&identity, &data, &config, 3).unwrap();
    let before = flow_nll(&identity, &data).unwrap();
    let after = flow_nll(&fit.flow, &data).unwrap();
    println!("identity NLL {before:.4}, fitted NLL {after:.4}");
    assert_eq!(fit.initial_nll, before);
    assert!(after < before);
}

#[test]
fn identity_flow_scores_like_cosine() {
    let flow = CouplingFlow::identity(4, 4, 8, 0).unwrap();
    let a = Embedding::new(vec![1.0, 0.0, 1.0, 0.0]);
    let b = Embedding::new(vec![1.0, 1.0, 0.0, 0.0]);
    assert!((flow_score(&flow, &a, &b).unwrap() - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn inverse_then_forward(seed in 0u64..1000, dim in 2usize..10, z in prop::collection::vec(-4.0f64..4.0, 10)) {
        let flow = CouplingFlow::random(dim, 2, 4, seed, 0.5).unwrap();
        let x = flow_inverse(&flow, &z[..dim]).unwrap();
        let (back, _) = flow_forward(&flow, &x).unwrap();
        for (a, b) in back.iter().zip(&z[..dim]) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
