//! Finite-difference checks in f64 for every network block and loss term.

mod common;

use common::grad_cases::{self, Checks, TOL};

fn check(checks: Checks) {
    assert!(!checks.is_empty());
    for (label, err, _) in checks {
        assert!(err <= TOL, "{label}: relative error {err:e}");
    }
}

#[test]
fn conv_ffn() {
    check(grad_cases::conv_ffn());
}

#[test]
fn basic_block() {
    check(grad_cases::basic_block());
}

#[test]
fn down_block() {
    check(grad_cases::down_block());
}

#[test]
fn up_block() {
    check(grad_cases::up_block());
}

#[test]
fn skip_fuse() {
    check(grad_cases::skip_fuse());
}

#[test]
fn generator_stem_and_head() {
    check(grad_cases::generator_stem_and_head());
}

#[test]
fn discriminator_encoder_layers() {
    check(grad_cases::discriminator_encoder_layers());
}

#[test]
fn discriminator_decoder_stage_and_seg_out() {
    check(grad_cases::discriminator_decoder_stage_and_seg_out());
}

#[test]
fn whole_discriminator_with_seg_head() {
    check(grad_cases::whole_discriminator_with_seg_head());
}

#[test]
fn mae_terms() {
    check(grad_cases::mae_terms());
}

#[test]
fn perceptual_term() {
    let checks = grad_cases::perceptual_term();
    assert!(
        checks.iter().all(|(_, _, zero)| *zero == 0),
        "perceptual gradients vanished"
    );
    check(checks);
}

#[test]
fn adversarial_terms() {
    check(grad_cases::adversarial_terms());
}

#[test]
fn feature_matching_term() {
    check(grad_cases::feature_matching_term());
}

#[test]
fn dice_ce_term() {
    check(grad_cases::dice_ce_term());
}
