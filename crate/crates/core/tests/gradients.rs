//! Reverse-mode gradients against central finite differences.

mod common;

use common::GradResult;

fn assert_all(results: Vec<GradResult>) {
    assert!(!results.is_empty());
    for r in results {
        assert!(r.passed(), "{}: max rel err {:.3e} ≥ {:e}", r.name, r.err, r.tol);
    }
}

#[test]
fn elementwise_ops() {
    assert_all(common::elementwise_ops());
}

#[test]
fn row_broadcast_ops() {
    assert_all(common::row_broadcast_ops());
}

#[test]
fn contractions() {
    assert_all(common::contractions());
}

#[test]
fn layout_ops() {
    assert_all(common::layout_ops());
}

#[test]
fn normalizations() {
    assert_all(common::normalizations());
}

#[test]
fn selective_scan_all_inputs() {
    assert_all(common::selective_scan_all_inputs());
}

#[test]
fn scan_gradient_in_small_step_regime() {
    assert_all(common::scan_gradient_in_small_step_regime());
}

#[test]
fn st_transformer_block() {
    assert_all(common::st_transformer_block());
}

#[test]
fn mamba_block_full() {
    assert_all(common::mamba_block_full());
}

#[test]
fn end_to_end_toy_model() {
    assert_all(common::end_to_end_toy_model());
}
