//! The verification battery as an integration suite: one test per criterion,
//! each printing its pass/fail line. Run with `-- --nocapture` to see the
//! values and timings.

use bspde_cli::checks::{self, CheckOutcome};

fn assert_outcome(c: CheckOutcome) {
    println!(
        "{} {}: value {:.6e} (tolerance {:.3e}) [{}ms] {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.name,
        c.value,
        c.tolerance,
        c.wall_ms,
        c.detail
    );
    assert!(
        c.pass,
        "{} failed: value {:.6e}, {}",
        c.name, c.value, c.detail
    );
}

#[test]
fn criterion_01_periodicity() {
    assert_outcome(checks::check_periodicity());
}

#[test]
fn criterion_02_fredholm_round_trip() {
    assert_outcome(checks::check_fredholm_round_trip());
}

#[test]
fn criterion_03_neumann_vs_direct() {
    assert_outcome(checks::check_neumann_vs_direct());
}

#[test]
fn criterion_04_duality() {
    assert_outcome(checks::check_duality());
}

#[test]
fn criterion_05_mass_contraction() {
    assert_outcome(checks::check_mass_contraction());
}

#[test]
fn criterion_06_nu2_arithmetic() {
    assert_outcome(checks::check_nu2_arithmetic());
}

#[test]
fn criterion_07_exit_bound() {
    assert_outcome(checks::check_exit_bound());
}

#[test]
fn criterion_08_feynman_kac() {
    assert_outcome(checks::check_feynman_kac());
}

#[test]
fn criterion_09_eps_sweep() {
    assert_outcome(checks::check_eps_sweep());
}

#[test]
fn criterion_10_convergence() {
    assert_outcome(checks::check_convergence());
}

#[test]
fn criterion_11_linearity() {
    assert_outcome(checks::check_linearity());
}
