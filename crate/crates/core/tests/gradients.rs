mod common;

use common::gradcases::{self, Case};
use common::FD_REL_TOL;

fn check(cases: Vec<Case>) {
    for (name, err) in cases {
        assert!(err < FD_REL_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    check(gradcases::elementwise());
}

#[test]
fn linear_algebra_ops() {
    check(gradcases::linear_algebra());
}

#[test]
fn normalisation_and_softmax() {
    check(gradcases::normalisation());
}

#[test]
fn structural_ops() {
    check(gradcases::structural());
}

#[test]
fn conv1d_grad() {
    check(gradcases::conv1d());
}

#[test]
fn attention_grad() {
    check(gradcases::attention());
}

#[test]
fn cross_entropy_grad() {
    check(gradcases::cross_entropy());
}

#[test]
fn stop_gradient_and_straight_through_route_gradients() {
    check(gradcases::gradient_routing());
}

#[test]
fn codec_objective_matches_frozen_assignment_surrogate() {
    check(gradcases::codec_loss());
}

#[test]
fn masked_transformer_loss_grad() {
    check(gradcases::masked_loss());
}

#[test]
fn residual_transformer_loss_grad_with_tied_heads() {
    check(gradcases::residual_loss());
}
