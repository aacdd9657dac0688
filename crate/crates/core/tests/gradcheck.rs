//! Central finite-difference checks of every differentiable operation, in
//! f64, over 20 seeds each.

mod common;

use common::{cases, over_seeds, relaxed_indicator_scalar_worst};

#[test]
fn every_operation_matches_finite_differences() {
    for (name, case) in cases() {
        over_seeds(|t, rng| case(t, rng)).assert(&name);
    }
}

#[test]
fn relaxed_indicator_derivative_is_exact() {
    let worst = relaxed_indicator_scalar_worst();
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}
