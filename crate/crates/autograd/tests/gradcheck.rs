//! Analytic gradients of every differentiable op against central finite
//! differences in f64.

#[path = "support/op_checks.rs"]
mod op_checks;

use op_checks::OpResult;

fn assert_all(results: Vec<OpResult>) {
    for r in results {
        assert!(r.probes >= 10, "{}: only {} probes", r.name, r.probes);
        assert!(r.passed(), "{}: {} (rel {})", r.name, r.worst, r.max_rel);
    }
}

#[test]
fn matmul_and_linear() {
    assert_all(op_checks::matmul_and_linear());
}

#[test]
fn elementwise_binary() {
    assert_all(op_checks::elementwise_binary());
}

#[test]
fn activations() {
    assert_all(op_checks::activations());
}

#[test]
fn dropout_in_train_mode_with_fixed_mask() {
    assert_all(op_checks::dropout_in_train_mode_with_fixed_mask());
}

#[test]
fn structural_ops() {
    assert_all(op_checks::structural_ops());
}

#[test]
fn conv2d_variants() {
    assert_all(op_checks::conv2d_variants());
}

#[test]
fn maxpool2d() {
    assert_all(op_checks::maxpool2d());
}

#[test]
fn batch_norm_train_and_eval() {
    assert_all(op_checks::batch_norm_train_and_eval());
}

#[test]
fn layer_norm() {
    assert_all(op_checks::layer_norm());
}

#[test]
fn reductions_and_losses() {
    assert_all(op_checks::reductions_and_losses());
}
