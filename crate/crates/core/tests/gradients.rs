mod common;

use common::grad::{codec_loss_check, entropy_model_checks, tape_op_checks};
use progcloud::nn::GradCheckReport;

fn assert_passes(name: &str, r: &GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.pass_fraction() >= 0.99,
        "{name}: {}/{} within tolerance, worst rel err {:.3e}",
        r.passed,
        r.checked,
        r.worst_rel
    );
}

#[test]
fn every_tape_op_matches_central_differences() {
    for (name, r) in tape_op_checks() {
        assert_passes(name, &r);
    }
}

#[test]
fn entropy_model_cdf_network() {
    for (name, r) in entropy_model_checks() {
        assert_passes(name, &r);
    }
}

#[test]
fn full_training_loss() {
    let r = codec_loss_check();
    assert_passes("codec", &r);
}
