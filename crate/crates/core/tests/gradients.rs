//! Analytic gradients against central finite differences in f64.

mod common;

use common::{model_checks, op_checks, FD_TOLERANCE};

fn assert_all(checks: Vec<common::GradCheck>) {
    let mut bad = Vec::new();
    for c in &checks {
        println!(
            "{:<36} entries {:>5}  max rel err {:.3e}  worst {:.6e} vs {:.6e}",
            c.name, c.entries, c.max_rel, c.worst.0, c.worst.1
        );
        if !c.ok() {
            bad.push(c.name.clone());
        }
    }
    assert!(bad.is_empty(), "gradient mismatch above {FD_TOLERANCE:e}: {bad:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    assert_all(op_checks());
}

#[test]
fn encoder_and_losses_match_finite_differences() {
    assert_all(model_checks());
}
