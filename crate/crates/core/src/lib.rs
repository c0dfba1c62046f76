// Validation guards use `!(x > 0.0)` so NaN inputs are rejected too, and
// index loops over several parallel grid slices read better than zipped
// iterator chains in the stencil code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Solver laboratory for linear backward stochastic PDEs with
//! non-local-in-time boundary conditions on a finite scenario tree.
//!
//! The crate is organized around the pipeline
//! `tree -> grid/operators -> backward solver -> non-local fixed point`,
//! with the forward dual density and a killed-diffusion Monte Carlo module
//! providing independent verification of the same quantities.

pub mod coeffs;
pub mod dual;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod mc;
pub mod nonlocal;
pub mod operators;
pub mod solver;
pub mod tree;

pub use coeffs::{CoefficientSet, CoercivityReport, OperatorForm, Profile};
pub use dual::{
    duality_check, mass_contraction_check, solve_forward_dual, ContractionCondition, DualDensity,
    DualityReport, MassReport,
};
pub use error::{Error, Result};
pub use grid::{Grid, Tridiagonal};
pub use mc::{
    estimate_exit_bound, evaluate_nu2, girsanov_weight, simulate_paths, survival_series,
    FeynmanKacReport, InitialLaw, McModel, McOptions, Nu2Report, PathEnsemble, PathSummary,
    WeightedEstimate,
};
pub use nonlocal::{
    apply_gamma, apply_t, assemble_q, solve_nonlocal, sweep_epsilon, FredholmInfo, GammaTerm,
    NonlocalCondition, NonlocalOptions, NonlocalSolution, QOperator, SolveMethod, SweepRow,
    TargetSpace, TimeWeights,
};
pub use solver::{
    operator_l, operator_lambda, solve_cauchy_backward, solve_deterministic_backward,
    BspdeSolution, DeterministicCoeffs, NormReport, SolverOptions, TerminalField,
};
pub use tree::{AdaptedField, Measurability, Representation, ScenarioTree};
