//! Forward dual density and the duality identity.
//!
//! The forward map is the exact transpose of the composite backward one-step
//! map under the probability- and h-weighted pairing: first the implicit
//! solve with the transposed second-order operator, then per-branch increment
//! coupling through the transposed first-order operators. The pairing
//! `E <p(., t), u(., t)>_h` is therefore conserved along the sweep to
//! round-off, which is the discrete duality identity.

use crate::coeffs::{CoefficientSet, OperatorForm};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::{assemble_a, assemble_a_slices, assemble_b};
use crate::solver::{operator_lambda, DeterministicCoeffs, SolverOptions, TerminalField};
use crate::tree::{AdaptedField, Measurability, ScenarioTree};
use rayon::prelude::*;

const PAR_NODE_THRESHOLD: usize = 512;

/// Adapted dual density together with its mass trajectory.
#[derive(Debug, Clone)]
pub struct DualDensity {
    /// p on levels 0..=M (levels below the start level stay zero).
    pub p: AdaptedField,
    /// `E integral p(x, t) dx` per level.
    pub mass: Vec<f64>,
    /// Smallest value attained anywhere (negativity indicates a
    /// non-monotone stencil).
    pub min_value: f64,
    /// Whether the cell Peclet condition `|f_hat| h <= 2 b` held everywhere.
    pub peclet_ok: bool,
    pub from_level: usize,
}

impl DualDensity {
    /// Expected terminal pairing `E <p(., T), Phi>_h`.
    pub fn terminal_pairing(&self, tree: &ScenarioTree, grid: &Grid, phi: &TerminalField) -> f64 {
        let m = tree.depth();
        let w = tree.node_prob(m);
        let mut acc = 0.0;
        for node in 0..tree.nodes_at_level(m) {
            acc += w * grid.inner(self.p.at(m, node), phi.at(node));
        }
        acc
    }

    pub fn final_mass(&self) -> f64 {
        *self.mass.last().unwrap()
    }
}

/// Solve the forward dual problem `p(s) = rho` up the tree.
pub fn solve_forward_dual(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    s: usize,
    rho: &[f64],
) -> Result<DualDensity> {
    if coeffs.form != OperatorForm::NonDivergence {
        return Err(Error::Domain(
            "the forward dual requires non-divergence coefficients".into(),
        ));
    }
    let n = grid.len();
    if rho.len() != n {
        return Err(Error::ShapeMismatch {
            what: "dual initial datum",
            expected: n,
            got: rho.len(),
        });
    }
    let m = tree.depth();
    if s >= m {
        return Err(Error::Domain(format!(
            "dual start level {s} must be below the tree depth {m}"
        )));
    }
    let dt = tree.dt();
    let bc = tree.branch_count();
    let nb = tree.n_brownian();
    let h = grid.h();

    let mut p = AdaptedField::zeros(tree, m + 1, n, Measurability::Adapted);
    // the datum is deterministic: every node of the start level carries rho
    for node in 0..tree.nodes_at_level(s) {
        p.at_mut(s, node).copy_from_slice(rho);
    }

    let mut min_value = rho.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let mut peclet_ok = true;

    for t in s..m {
        let nodes = tree.nodes_at_level(t);
        let p_ref = &p;
        let step = |node: usize| -> Result<(Vec<Vec<f64>>, f64, bool)> {
            let a_op = assemble_a(coeffs, grid, t, node)?;
            // cell Peclet monitor for the monotone-stencil property
            let b = coeffs.b.at(t, node);
            let f = coeffs.drift.at(t, node);
            let pe_ok = (0..n).all(|j| f[j].abs() * h <= 2.0 * b[j] + 1e-14);
            let q = a_op.transpose().solve_implicit(dt, p_ref.at(t, node))?;
            let mut bq = Vec::with_capacity(nb);
            for i in 0..nb {
                let b_op = assemble_b(coeffs, grid, i, t, node)?;
                bq.push(b_op.transpose().apply(&q));
            }
            let mut children = Vec::with_capacity(bc);
            let mut local_min = f64::INFINITY;
            for branch in 0..bc {
                let incr = tree.increment(branch);
                let mut row = q.clone();
                for (i, bqi) in bq.iter().enumerate() {
                    let w = incr[i];
                    for (r, &v) in row.iter_mut().zip(bqi) {
                        *r += w * v;
                    }
                }
                for &v in &row {
                    local_min = local_min.min(v);
                }
                children.push(row);
            }
            Ok((children, local_min, pe_ok))
        };

        let results: Vec<(Vec<Vec<f64>>, f64, bool)> = if nodes >= PAR_NODE_THRESHOLD {
            (0..nodes)
                .into_par_iter()
                .map(step)
                .collect::<Result<Vec<_>>>()?
        } else {
            (0..nodes).map(step).collect::<Result<Vec<_>>>()?
        };
        for (node, (children, local_min, pe_ok)) in results.into_iter().enumerate() {
            min_value = min_value.min(local_min);
            peclet_ok &= pe_ok;
            for (branch, row) in children.into_iter().enumerate() {
                p.at_mut(t + 1, tree.child(node, branch))
                    .copy_from_slice(&row);
            }
        }
    }

    let mass = (0..=m)
        .map(|t| {
            if t < s {
                0.0
            } else {
                let w = tree.node_prob(t);
                (0..tree.nodes_at_level(t))
                    .map(|node| w * grid.mass(p.at(t, node)))
                    .sum()
            }
        })
        .collect();

    Ok(DualDensity {
        p,
        mass,
        min_value,
        peclet_ok,
        from_level: s,
    })
}

/// Both sides of the duality identity and their gap.
#[derive(Debug, Clone)]
pub struct DualityReport {
    /// `<rho, Q Phi>_h` via the backward solve.
    pub lhs: f64,
    /// `<kappa p(., T), Phi>` via the forward dual solve.
    pub rhs: f64,
    pub gap: f64,
}

/// Evaluate the duality identity for the scaled-initial condition
/// `Gamma u = kappa u(., 0)`: the left side runs the backward machinery,
/// the right side the forward dual, and the two must agree to round-off.
pub fn duality_check(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    rho: &[f64],
    phi_terminal: &TerminalField,
    kappa: f64,
) -> Result<DualityReport> {
    let opts = SolverOptions::default();
    let sol = operator_lambda(tree, grid, coeffs, tree.depth(), phi_terminal, &opts)?;
    let lhs = kappa * grid.inner(rho, sol.u.at(0, 0));
    let dual = solve_forward_dual(tree, grid, coeffs, 0, rho)?;
    let rhs = kappa * dual.terminal_pairing(tree, grid, phi_terminal);
    Ok(DualityReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// Which solvability condition supplies the contraction constant.
#[derive(Debug, Clone, Copy)]
pub enum ContractionCondition {
    /// Interior killing rate bounded below: nu_* = exp(-c_lambda T).
    InteriorKilling { c_lambda: f64 },
    /// Small zero-order noise: nu_* = min_q nu_2(q) from the exit bound `nu`
    /// and the integral `sum_i int_0^T sup_x beta_bar_i^2 dt`.
    SmallBetaBar { nu: f64, beta_bar_sq_integral: f64 },
}

/// Result of the mass-contraction check.
#[derive(Debug, Clone)]
pub struct MassReport {
    pub final_mass: f64,
    pub nu_star: f64,
    pub pass: bool,
    pub mass_trajectory: Vec<f64>,
    pub min_density: f64,
    pub peclet_ok: bool,
}

/// Check `E integral p(x, T) dx <= nu_*` for a normalized non-negative
/// initial density under the declared contraction condition.
pub fn mass_contraction_check(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    rho: &[f64],
    condition: ContractionCondition,
    tol: f64,
) -> Result<MassReport> {
    if rho.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "mass contraction requires a non-negative initial density".into(),
        ));
    }
    let total = grid.mass(rho);
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(format!(
            "initial density must be normalized: integral = {total}"
        )));
    }
    if !coeffs.beta_vanishes_at_boundary() {
        return Err(Error::Coefficient(
            "the contraction bounds require beta_i to vanish on the \
             two grid cells adjacent to the boundary"
                .into(),
        ));
    }
    let nu_star = match condition {
        ContractionCondition::InteriorKilling { c_lambda } => {
            if c_lambda <= 0.0 {
                return Err(Error::Domain(
                    "interior killing requires c_lambda > 0".into(),
                ));
            }
            // the declared floor must actually bound lambda from below
            for t in 0..coeffs.n_levels() {
                for node in 0..coeffs.lambda.nodes_stored(t) {
                    for &v in coeffs.lambda.at(t, node) {
                        if v < c_lambda - 1e-12 {
                            return Err(Error::Domain(format!(
                                "lambda = {v} falls below the declared floor {c_lambda}"
                            )));
                        }
                    }
                }
            }
            (-c_lambda * tree.horizon()).exp()
        }
        ContractionCondition::SmallBetaBar {
            nu,
            beta_bar_sq_integral,
        } => {
            let rep = crate::mc::evaluate_nu2_best(nu, beta_bar_sq_integral)?;
            if !rep.satisfiable {
                return Err(Error::Domain(format!(
                    "the small-noise condition fails: lhs = {:.6} >= 0",
                    rep.smallb_lhs
                )));
            }
            rep.nu2_min
        }
    };
    let dual = solve_forward_dual(tree, grid, coeffs, 0, rho)?;
    let final_mass = dual.final_mass();
    Ok(MassReport {
        final_mass,
        nu_star,
        pass: final_mass <= nu_star + tol,
        mass_trajectory: dual.mass.clone(),
        min_density: dual.min_value,
        peclet_ok: dual.peclet_ok,
    })
}

/// Mass trajectory of the deterministic dual `p' = A* p` (all first-order
/// stochastic couplings zero), affordable at fine time grids.
pub fn mass_decay_deterministic(
    grid: &Grid,
    coeffs: &DeterministicCoeffs,
    rho: &[f64],
    m: usize,
    horizon: f64,
) -> Result<Vec<f64>> {
    if coeffs.form != OperatorForm::NonDivergence {
        return Err(Error::Domain(
            "the forward dual requires non-divergence coefficients".into(),
        ));
    }
    let dt = horizon / m as f64;
    let mut p = rho.to_vec();
    let mut mass = Vec::with_capacity(m + 1);
    mass.push(grid.mass(&p));
    for t in 0..m {
        let a_op = assemble_a_slices(
            coeffs.form,
            grid,
            &coeffs.b[t],
            &coeffs.drift[t],
            &coeffs.lambda[t],
            t,
            0,
        )?;
        p = a_op.transpose().solve_implicit(dt, &p)?;
        mass.push(grid.mass(&p));
    }
    Ok(mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{node_noise, Profile};
    use std::f64::consts::PI;

    fn grid01(j: usize) -> Grid {
        Grid::new(0.0, 1.0, j).unwrap()
    }

    fn general_coeffs(tree: &ScenarioTree, grid: &Grid, seed: u64) -> CoefficientSet {
        let n = tree.n_brownian();
        let beta: Vec<Profile> = (0..n)
            .map(|i| Profile::Smooth {
                base: 0.0,
                amp: 0.3 / (i as f64 + 1.0),
                freq: 1.0,
                rate: 0.0,
            })
            .collect();
        let beta_bar: Vec<Profile> = (0..n)
            .map(|i| Profile::NodeRandom {
                base: 0.1,
                amp: 0.05,
                seed: seed + i as u64,
            })
            .collect();
        CoefficientSet::from_profiles(
            tree,
            grid,
            tree.depth(),
            OperatorForm::NonDivergence,
            &Profile::NodeRandom {
                base: 1.0,
                amp: 0.15,
                seed,
            },
            &Profile::Smooth {
                base: 0.2,
                amp: 0.1,
                freq: 2.0,
                rate: 1.0,
            },
            &Profile::Constant(0.4),
            &beta,
            &beta_bar,
        )
        .unwrap()
    }

    fn random_terminal(tree: &ScenarioTree, grid: &Grid, seed: u64) -> TerminalField {
        TerminalField::PerNode(
            (0..tree.leaf_count())
                .map(|node| (0..grid.len()).map(|j| node_noise(seed, j, node)).collect())
                .collect(),
        )
    }

    #[test]
    fn duality_gap_is_roundoff_one_brownian() {
        let tree = ScenarioTree::build(6, 1, 1.0).unwrap();
        let grid = grid01(16);
        let coeffs = general_coeffs(&tree, &grid, 17);
        let rho: Vec<f64> = (0..16).map(|j| node_noise(5, j, 0) + 1.5).collect();
        let phi = random_terminal(&tree, &grid, 23);
        let rep = duality_check(&tree, &grid, &coeffs, &rho, &phi, 0.8).unwrap();
        assert!(rep.gap <= 1e-10, "duality gap {:.3e}", rep.gap);
        assert!(rep.lhs.abs() > 1e-6, "test should be non-trivial");
    }

    #[test]
    fn duality_gap_is_roundoff_two_brownian() {
        let tree = ScenarioTree::build(4, 2, 0.8).unwrap();
        let grid = grid01(10);
        let coeffs = general_coeffs(&tree, &grid, 71);
        let rho: Vec<f64> = (0..10).map(|j| node_noise(9, j, 1)).collect();
        let phi = random_terminal(&tree, &grid, 31);
        let rep = duality_check(&tree, &grid, &coeffs, &rho, &phi, 1.3).unwrap();
        assert!(rep.gap <= 1e-10, "duality gap {:.3e}", rep.gap);
    }

    #[test]
    fn duality_trivial_cases() {
        let tree = ScenarioTree::build(3, 1, 1.0).unwrap();
        let grid = grid01(8);
        let coeffs = general_coeffs(&tree, &grid, 2);
        let zero = vec![0.0; 8];
        let rho: Vec<f64> = (0..8).map(|j| j as f64).collect();
        let phi = random_terminal(&tree, &grid, 3);
        let r = duality_check(&tree, &grid, &coeffs, &zero, &phi, 1.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        let r = duality_check(&tree, &grid, &coeffs, &rho, &TerminalField::zeros(8), 1.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        let r = duality_check(&tree, &grid, &coeffs, &rho, &phi, 0.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
    }

    fn heat_nondiv(tree: &ScenarioTree, grid: &Grid, b: f64, lambda: f64) -> CoefficientSet {
        CoefficientSet::from_profiles(
            tree,
            grid,
            tree.depth(),
            OperatorForm::NonDivergence,
            &Profile::Constant(b),
            &Profile::Constant(0.0),
            &Profile::Constant(lambda),
            &[Profile::Constant(0.0)],
            &[Profile::Constant(0.0)],
        )
        .unwrap()
    }

    #[test]
    fn zero_datum_stays_zero() {
        let tree = ScenarioTree::build(4, 1, 1.0).unwrap();
        let grid = grid01(8);
        let coeffs = heat_nondiv(&tree, &grid, 0.5, 0.0);
        let dual = solve_forward_dual(&tree, &grid, &coeffs, 0, &[0.0; 8]).unwrap();
        assert!(dual.mass.iter().all(|&v| v == 0.0));
        assert_eq!(dual.min_value, 0.0);
    }

    #[test]
    fn mass_monotone_without_killing() {
        let tree = ScenarioTree::build(6, 1, 1.0).unwrap();
        let grid = grid01(16);
        let coeffs = heat_nondiv(&tree, &grid, 0.4, 0.0);
        let rho: Vec<f64> = (0..16)
            .map(|j| 1.0 + 0.3 * (j as f64 * 0.9).sin())
            .collect();
        let dual = solve_forward_dual(&tree, &grid, &coeffs, 0, &rho).unwrap();
        for t in 1..dual.mass.len() {
            assert!(
                dual.mass[t] <= dual.mass[t - 1] + 1e-13,
                "mass increased at level {t}"
            );
        }
        assert!(dual.min_value >= -1e-12);
        assert!(dual.peclet_ok);
    }

    #[test]
    fn eigenmode_mass_decay_matches_closed_form() {
        // rho = sin(pi x) is an exact eigenvector of the discrete operator,
        // so the mass decays by exactly (1 + dt (b mu_1 + lambda))^{-1} per step
        let m = 16;
        let horizon = 0.25;
        let b = 0.3;
        let lambda = 0.5;
        let tree = ScenarioTree::build(m, 1, horizon).unwrap();
        let grid = grid01(24);
        let coeffs = heat_nondiv(&tree, &grid, b, lambda);
        let rho: Vec<f64> = (0..grid.len()).map(|j| (PI * grid.x(j)).sin()).collect();
        let dual = solve_forward_dual(&tree, &grid, &coeffs, 0, &rho).unwrap();
        let h = grid.h();
        let mu1 = 2.0 * b / (h * h) * (1.0 - (PI * h).cos()) + lambda;
        let per_step = 1.0 / (1.0 + tree.dt() * mu1);
        let expected = dual.mass[0] * per_step.powi(m as i32);
        assert!(
            (dual.final_mass() - expected).abs() <= 1e-12 * expected,
            "{} vs {}",
            dual.final_mass(),
            expected
        );
        // and tracks the continuum rate pi^2 b + lambda at a few percent
        let continuum = dual.mass[0] * (-(PI * PI * b + lambda) * horizon).exp();
        let rel = (dual.final_mass() - continuum).abs() / continuum;
        assert!(rel < 0.05, "relative gap to continuum {rel}");
    }

    #[test]
    fn interior_killing_contracts_mass() {
        let tree = ScenarioTree::build(8, 1, 1.0).unwrap();
        let grid = grid01(32);
        let coeffs = heat_nondiv(&tree, &grid, 0.5, 2.0);
        let mut rho = vec![1.0; 32];
        let total = grid.mass(&rho);
        for v in rho.iter_mut() {
            *v /= total;
        }
        let rep = mass_contraction_check(
            &tree,
            &grid,
            &coeffs,
            &rho,
            ContractionCondition::InteriorKilling { c_lambda: 2.0 },
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "mass {} vs nu_* {}", rep.final_mass, rep.nu_star);
        assert!((rep.nu_star - (-2.0f64).exp()).abs() < 1e-15);
        assert!(rep.min_density >= -1e-12);

        // an unnormalized density is rejected
        assert!(mass_contraction_check(
            &tree,
            &grid,
            &coeffs,
            &vec![0.0; 32],
            ContractionCondition::InteriorKilling { c_lambda: 2.0 },
            1e-6,
        )
        .is_err());
    }

    #[test]
    fn kappa_reduction_gives_interior_killing() {
        // |kappa| < 1 reduces to interior killing with c_lambda = -q,
        // q = log|kappa| / T < 0: a problem with lambda = -q then passes the
        // contraction bound nu_1 = |kappa|
        let kappa: f64 = 0.6;
        let horizon = 1.0;
        let q = kappa.abs().ln() / horizon;
        let c_lambda = -q;
        let tree = ScenarioTree::build(8, 1, horizon).unwrap();
        let grid = grid01(24);
        let coeffs = heat_nondiv(&tree, &grid, 0.5, c_lambda);
        let mut rho: Vec<f64> = (0..24).map(|j| (PI * grid.x(j)).sin()).collect();
        let total = grid.mass(&rho);
        for v in rho.iter_mut() {
            *v /= total;
        }
        let rep = mass_contraction_check(
            &tree,
            &grid,
            &coeffs,
            &rho,
            ContractionCondition::InteriorKilling { c_lambda },
            1e-9,
        )
        .unwrap();
        assert!(rep.pass);
        assert!((rep.nu_star - kappa).abs() < 1e-12);
    }

    #[test]
    fn large_drift_trips_the_peclet_monitor() {
        let tree = ScenarioTree::build(3, 1, 1.0).unwrap();
        let grid = grid01(8);
        // |f_hat| h > 2 b somewhere: the monotone-stencil monitor must trip
        let coeffs = CoefficientSet::from_profiles(
            &tree,
            &grid,
            3,
            OperatorForm::NonDivergence,
            &Profile::Constant(0.05),
            &Profile::Constant(5.0),
            &Profile::Constant(0.0),
            &[Profile::Constant(0.0)],
            &[Profile::Constant(0.0)],
        )
        .unwrap();
        let rho = vec![1.0; 8];
        let dual = solve_forward_dual(&tree, &grid, &coeffs, 0, &rho).unwrap();
        assert!(!dual.peclet_ok);
    }

    #[test]
    fn contraction_check_requires_boundary_vanishing_beta() {
        let tree = ScenarioTree::build(4, 1, 1.0).unwrap();
        let grid = grid01(16);
        let coeffs = CoefficientSet::from_profiles(
            &tree,
            &grid,
            4,
            OperatorForm::NonDivergence,
            &Profile::Constant(1.0),
            &Profile::Constant(0.0),
            &Profile::Constant(2.0),
            &[Profile::Constant(0.5)],
            &[Profile::Constant(0.0)],
        )
        .unwrap();
        let mut rho = vec![1.0; 16];
        let total = grid.mass(&rho);
        for v in rho.iter_mut() {
            *v /= total;
        }
        let err = mass_contraction_check(
            &tree,
            &grid,
            &coeffs,
            &rho,
            ContractionCondition::InteriorKilling { c_lambda: 2.0 },
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Coefficient(_)));
    }

    #[test]
    fn contraction_bound_implies_invertibility() {
        // with nu_* = exp(-2), any kappa_bar with kappa_bar nu_* < 1 keeps the
        // spectral radius of the scaled Q below one
        let tree = ScenarioTree::build(6, 1, 1.0).unwrap();
        let grid = grid01(16);
        let coeffs = heat_nondiv(&tree, &grid, 0.5, 2.0);
        let nu_star = (-2.0f64).exp();
        let kappa_bar = 0.9 / nu_star;
        let q = crate::nonlocal::assemble_q(
            &crate::nonlocal::NonlocalCondition::scaled_initial(kappa_bar),
            &tree,
            &grid,
            &coeffs,
            &crate::nonlocal::NonlocalOptions::default(),
        )
        .unwrap();
        let rho = q.spectral_radius();
        assert!(rho < 1.0, "spectral radius {rho} at kappa_bar {kappa_bar}");
    }

    #[test]
    fn delta_density_survival_matches_sine_transform_oracle() {
        // lambda = 0, b = 0.5, delta-like rho at the center: the final mass is
        // the discrete survival probability. Oracle: expand rho in discrete
        // sine modes and decay each one analytically.
        let j = 63usize;
        let m = 64usize;
        let horizon = 1.0;
        let b = 0.5;
        let grid = grid01(j);
        let coeffs = DeterministicCoeffs::from_profiles(
            &grid,
            m,
            horizon,
            OperatorForm::NonDivergence,
            &Profile::Constant(b),
            &Profile::Constant(0.0),
            &Profile::Constant(0.0),
        )
        .unwrap();
        let h = grid.h();
        let center = j / 2;
        let mut rho = vec![0.0; j];
        rho[center] = 1.0 / h;
        let mass = mass_decay_deterministic(&grid, &coeffs, &rho, m, horizon).unwrap();

        // independent eigen-decomposition of the same scheme
        let dt = horizon / m as f64;
        let mut oracle = 0.0;
        for k in 1..=j {
            let kf = k as f64;
            let mu = 2.0 * b / (h * h) * (1.0 - (kf * PI * h).cos());
            let coeff = (2.0 / (j as f64 + 1.0))
                * (0..j)
                    .map(|l| rho[l] * (kf * PI * grid.x(l)).sin())
                    .sum::<f64>();
            let int_mode = h * (0..j).map(|l| (kf * PI * grid.x(l)).sin()).sum::<f64>();
            oracle += coeff * (1.0 + dt * mu).powi(-(m as i32)) * int_mode;
        }
        assert!(
            (mass[m] - oracle).abs() < 1e-10,
            "stepped {} vs oracle {}",
            mass[m],
            oracle
        );
        // and sits near the continuum Brownian survival 0.00916
        let continuum = 0.0091569;
        assert!(
            (mass[m] - continuum).abs() / continuum < 0.35,
            "mass {} vs continuum {}",
            mass[m],
            continuum
        );
    }
}
