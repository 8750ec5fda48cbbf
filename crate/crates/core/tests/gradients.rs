//! Reverse-mode gradients against central finite differences.

mod support;

use ppac::engine::Variant;
use ppac::models::ModelKind;
use ppac::numerics::{Tape, Tensor};
use support::gradcheck::{model_errors, op_errors, spec, Component, ALL_COMPONENTS, TOL};

fn assert_all_below(errors: Vec<(String, f64)>) {
    assert!(!errors.is_empty());
    for (what, err) in errors {
        assert!(err < TOL, "{what}: relative error {err:e}");
    }
}

#[test]
fn every_tape_operation_matches_finite_differences() {
    assert_all_below(op_errors());
}

#[test]
fn penalty_gradient_is_twice_lambda_times_parameter() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.5, 3.0])).unwrap();
    let p = tape.l2_penalty(0.01, &[x]).unwrap();
    let g = tape.gradients(p).unwrap();
    let expected = [0.01, -0.03, 0.06];
    for (a, b) in g.get(x).unwrap().iter().zip(expected) {
        assert!((*a as f64 - b).abs() < 1e-8);
    }
}

#[test]
fn bprmf_losses_match_finite_differences() {
    assert_all_below(model_errors(spec(ModelKind::Bprmf), &ALL_COMPONENTS));
}

#[test]
fn ncf_losses_match_finite_differences() {
    assert_all_below(model_errors(spec(ModelKind::Ncf), &ALL_COMPONENTS));
}

#[test]
fn lightgcn_losses_match_finite_differences() {
    assert_all_below(model_errors(spec(ModelKind::Lightgcn), &ALL_COMPONENTS));
}

#[test]
fn lightgcn_depths_match_finite_differences() {
    for layers in [0, 1, 2] {
        let mut s = spec(ModelKind::Lightgcn);
        s.layers = layers;
        assert_all_below(model_errors(s, &[Component::Ranking(Variant::Full), Component::Total]));
    }
}

#[test]
fn separate_head_tables_match_finite_differences() {
    for kind in [ModelKind::Bprmf, ModelKind::Ncf, ModelKind::Lightgcn] {
        let mut s = spec(kind);
        s.shared_embeddings = false;
        assert_all_below(model_errors(s, &[Component::Ranking(Variant::Full), Component::Pp, Component::Gp, Component::Total]));
    }
}
