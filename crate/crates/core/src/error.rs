//! Error type shared by all solver modules.

use thiserror::Error;

/// Errors produced by tree construction, operator assembly, and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A requested discretization would exceed a configured size budget.
    #[error("size budget exceeded for {what}: requested {requested}, limit {limit}")]
    BudgetExceeded {
        what: &'static str,
        requested: u128,
        limit: u128,
    },

    /// An input slice or field has the wrong shape.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Martingale-representation residual above tolerance: the child values
    /// do not lie in the span of {1, increments} and cannot come from an
    /// adapted one-step transition.
    #[error("martingale representation residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Representation { residual: f64, tolerance: f64 },

    /// Superparabolicity b - (1/2) sum beta_i^2 >= delta > 0 fails.
    #[error("coercivity violated: delta = {delta:.6e} at x = {x:.6}, level {level}, node {node}")]
    CoercivityViolated {
        delta: f64,
        x: f64,
        level: usize,
        node: usize,
    },

    /// A coefficient constraint failed (e.g. 2b - sum beta_i^2 must stay positive).
    #[error("coefficient constraint violated: {0}")]
    Coefficient(String),

    /// An argument lies outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The Fredholm operator (I - Q) is numerically singular: 1 is (close to)
    /// an eigenvalue of Q, so the homogeneous problem admits non-zero solutions.
    #[error(
        "(I - Q) numerically singular: condition number {condition:.3e}, nearest eigenvalue of Q to 1 is {nearest_re:.8}{nearest_im:+.8}i (distance {distance:.3e})"
    )]
    FredholmSingular {
        condition: f64,
        nearest_re: f64,
        nearest_im: f64,
        distance: f64,
    },

    /// Neumann iteration failed to contract; the direct solve should be used.
    #[error("Neumann iteration diverged after {iterations} steps (growth factor {factor:.4}); use the direct method")]
    NeumannDiverged { iterations: usize, factor: f64 },

    /// A solver postcondition failed, indicating an internal inconsistency.
    #[error("internal consistency check failed: {0}")]
    Inconsistency(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
