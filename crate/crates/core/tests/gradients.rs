mod common;

use common::gradcheck::{
    ct_loss_worst, flow_nll_worst, nli_siamese_loss_worst, sed_loss_worst, sts_regression_loss_worst, MAX_REL, SEEDS,
};

fn check(name: &str, worst: f64) {
    println!("{name}: max relative error {worst:.3e}");
    assert!(worst < MAX_REL, "{name}: max relative error {worst:e}");
}

#[test]
fn sed_loss_gradients() {
    check("sed_loss", sed_loss_worst(SEEDS));
}

#[test]
fn ct_loss_gradients() {
    check("ct_loss", ct_loss_worst(SEEDS));
}

#[test]
fn nli_siamese_loss_gradients() {
    check("nli_siamese_loss", nli_siamese_loss_worst(SEEDS));
}

#[test]
fn sts_regression_loss_gradients() {
    check("sts_regression_loss", sts_regression_loss_worst(SEEDS));
}

#[test]
fn flow_nll_gradients() {
    check("flow_nll", flow_nll_worst(SEEDS));
}
