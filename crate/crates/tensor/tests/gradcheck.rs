//! Runs the finite-difference harness for every layer kind.

use dispenseforge_tensor::gradcheck::{self, LayerCheck};

const TOL: f64 = 1e-3;
const CASES: usize = 100;

fn assert_ok(c: LayerCheck) {
    assert_eq!(c.cases, CASES);
    assert!(c.max_rel_err < TOL, "{} max rel err {:.3e}", c.layer, c.max_rel_err);
}

#[test]
fn conv2d() {
    assert_ok(gradcheck::check_conv2d(CASES, 11));
}

#[test]
fn maxpool2d() {
    assert_ok(gradcheck::check_maxpool2d(CASES, 12));
}

#[test]
fn upsample2d() {
    assert_ok(gradcheck::check_upsample2d(CASES, 13));
}

#[test]
fn dense_and_flatten() {
    assert_ok(gradcheck::check_dense(CASES, 14));
}

#[test]
fn activations() {
    gradcheck::check_activations(CASES, 15).into_iter().for_each(assert_ok);
}

#[test]
fn elementwise_and_reductions() {
    assert_ok(gradcheck::check_elementwise(CASES, 16));
}

#[test]
fn losses() {
    assert_ok(gradcheck::check_losses(CASES, 17));
}

#[test]
fn small_network() {
    assert_ok(gradcheck::check_network(CASES, 18));
}
