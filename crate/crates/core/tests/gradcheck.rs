//! Central-difference checks of the full differentiated rollout.

mod support;

use support::check;

fn assert_close(enabled: bool, mu: f64) {
    let (err, skipped) = check(enabled, mu, 3);
    eprintln!("selector {enabled} mu {mu}: worst group error {err:.2e}, {:.1}% skipped", 100.0 * skipped);
    assert!(err <= 1e-2 && skipped <= 0.1);
}

#[test]
fn l1_gradients_through_the_recursion() {
    assert_close(true, 0.0);
}

#[test]
fn motion_gradients_through_the_recursion() {
    assert_close(true, 10.0);
}

#[test]
fn gradients_without_selector() {
    assert_close(false, 10.0);
}
