mod common;

use common::{gradient_suite, Term};

#[test]
fn every_loss_term_matches_finite_differences() {
    for (term, err) in gradient_suite(20) {
        assert!(err < 1e-3, "{term:?}: relative error {err:.3e}");
    }
}

#[test]
fn fixtures_exercise_both_layouts() {
    let seq = common::grad_fixture(0, false);
    let tok = common::grad_fixture(1, true);
    assert_eq!(seq.acts.values.ndim(), 2);
    assert_eq!(tok.acts.values.ndim(), 3);
    assert!(tok.top_n >= 1);
    let _ = Term::Cau;
}
