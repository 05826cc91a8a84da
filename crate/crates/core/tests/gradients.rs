//! Finite-difference checks of every objective and model map over 10 seeds.

use neurogen::gradsuite::{check_target, GRAD_TOL, TARGETS};

#[test]
fn every_target_passes_on_ten_seeds() {
    let mut failures = Vec::new();
    for target in TARGETS {
        let worst = (0..10)
            .map(|seed| check_target(target, seed).unwrap())
            .fold(0.0f64, f64::max);
        println!("{target}: {worst:.3e}");
        if worst >= GRAD_TOL {
            failures.push((target, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn unknown_target_is_an_error() {
    assert!(check_target("nope", 0).is_err());
}
