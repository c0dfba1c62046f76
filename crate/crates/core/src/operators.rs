//! Discrete second-order and first-order operators and their duals.
//!
//! The duals are literal matrix transposes of the primal operators, so the
//! h-weighted adjoint identity holds at machine precision; for non-divergence
//! coefficients the transpose coincides entry-by-entry with the centered
//! stencil of the analytic dual.

use crate::coeffs::{CoefficientSet, OperatorForm};
use crate::error::{Error, Result};
use crate::grid::{Grid, Tridiagonal};

/// Assemble the second-order operator from raw coefficient slices.
///
/// Divergence form uses the conservative face-averaged stencil
/// `(b_{j+1/2}(v_{j+1}-v_j) - b_{j-1/2}(v_j-v_{j-1}))/h^2`; non-divergence
/// form uses the plain centered second difference times `b_j`. Both add the
/// centered first-order drift term and `-lambda_j` on the diagonal.
pub fn assemble_a_slices(
    form: OperatorForm,
    grid: &Grid,
    b: &[f64],
    f: &[f64],
    lam: &[f64],
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    let n = grid.len();
    let h = grid.h();
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            what: "coefficient grid length",
            expected: n,
            got: b.len(),
        });
    }
    let mut op = Tridiagonal::zeros(n, level, node);
    match form {
        OperatorForm::Divergence => {
            // face values of b; boundary faces take the single adjacent value
            let face = |j: usize| -> f64 {
                if j == 0 {
                    b[0]
                } else if j == n {
                    b[n - 1]
                } else {
                    0.5 * (b[j - 1] + b[j])
                }
            };
            for j in 0..n {
                let bw = face(j);
                let be = face(j + 1);
                op.diag[j] = -(bw + be) / (h * h) - lam[j];
                if j > 0 {
                    op.sub[j - 1] = bw / (h * h) - f[j] / (2.0 * h);
                }
                if j + 1 < n {
                    op.sup[j] = be / (h * h) + f[j] / (2.0 * h);
                }
            }
        }
        OperatorForm::NonDivergence => {
            for j in 0..n {
                op.diag[j] = -2.0 * b[j] / (h * h) - lam[j];
                if j > 0 {
                    op.sub[j - 1] = b[j] / (h * h) - f[j] / (2.0 * h);
                }
                if j + 1 < n {
                    op.sup[j] = b[j] / (h * h) + f[j] / (2.0 * h);
                }
            }
        }
    }
    Ok(op)
}

/// Assemble the second-order operator at one (level, node) slice.
pub fn assemble_a(
    coeffs: &CoefficientSet,
    grid: &Grid,
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    assemble_a_slices(
        coeffs.form,
        grid,
        coeffs.b.at(level, node),
        coeffs.drift.at(level, node),
        coeffs.lambda.at(level, node),
        level,
        node,
    )
}

/// Assemble `B_i v = beta_i v' + beta_bar_i v` from raw slices.
pub fn assemble_b_slices(
    grid: &Grid,
    beta: &[f64],
    bar: &[f64],
    level: usize,
    node: usize,
) -> Tridiagonal {
    let n = grid.len();
    let h = grid.h();
    let mut op = Tridiagonal::zeros(n, level, node);
    for j in 0..n {
        op.diag[j] = bar[j];
        if j > 0 {
            op.sub[j - 1] = -beta[j] / (2.0 * h);
        }
        if j + 1 < n {
            op.sup[j] = beta[j] / (2.0 * h);
        }
    }
    op
}

/// Assemble the first-order stochastic coupling `B_i v = beta_i v' + beta_bar_i v`.
pub fn assemble_b(
    coeffs: &CoefficientSet,
    grid: &Grid,
    i: usize,
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    if i >= coeffs.n_brownian() {
        return Err(Error::Domain(format!(
            "Brownian index {i} out of range (N = {})",
            coeffs.n_brownian()
        )));
    }
    Ok(assemble_b_slices(
        grid,
        coeffs.beta[i].at(level, node),
        coeffs.beta_bar[i].at(level, node),
        level,
        node,
    ))
}

/// Dual second-order operator as the exact transpose of [`assemble_a`].
/// Requires non-divergence coefficients, matching the dual stencil
/// `(b v)'' - (f_hat v)' - lambda v`.
pub fn assemble_a_star(
    coeffs: &CoefficientSet,
    grid: &Grid,
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    if coeffs.form != OperatorForm::NonDivergence {
        return Err(Error::Domain(
            "the dual operator requires non-divergence coefficients; \
             convert with to_nondivergence first"
                .into(),
        ));
    }
    Ok(assemble_a(coeffs, grid, level, node)?.transpose())
}

/// Dual first-order operator as the exact transpose of [`assemble_b`]:
/// `B_i* v = -(beta_i v)' + beta_bar_i v`.
pub fn assemble_b_star(
    coeffs: &CoefficientSet,
    grid: &Grid,
    i: usize,
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    Ok(assemble_b(coeffs, grid, i, level, node)?.transpose())
}

/// Centered-stencil discretization of the analytic dual
/// `(b v)'' - (f_hat v)' - lambda v`, used as a consistency check against
/// the transpose construction.
pub fn analytic_a_star(
    coeffs: &CoefficientSet,
    grid: &Grid,
    level: usize,
    node: usize,
) -> Result<Tridiagonal> {
    if coeffs.form != OperatorForm::NonDivergence {
        return Err(Error::Domain(
            "the analytic dual stencil requires non-divergence coefficients".into(),
        ));
    }
    let n = grid.len();
    let h = grid.h();
    let b = coeffs.b.at(level, node);
    let f = coeffs.drift.at(level, node);
    let lam = coeffs.lambda.at(level, node);
    let mut op = Tridiagonal::zeros(n, level, node);
    for j in 0..n {
        op.diag[j] = -2.0 * b[j] / (h * h) - lam[j];
        if j > 0 {
            op.sub[j - 1] = b[j - 1] / (h * h) + f[j - 1] / (2.0 * h);
        }
        if j + 1 < n {
            op.sup[j] = b[j + 1] / (h * h) - f[j + 1] / (2.0 * h);
        }
    }
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Profile;
    use crate::tree::ScenarioTree;
    use std::f64::consts::PI;

    fn setup(j: usize) -> (ScenarioTree, Grid) {
        (
            ScenarioTree::build(2, 1, 1.0).unwrap(),
            Grid::new(0.0, 1.0, j).unwrap(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn profile_set(
        tree: &ScenarioTree,
        grid: &Grid,
        form: OperatorForm,
        b: Profile,
        f: Profile,
        lam: Profile,
        beta: Profile,
        bar: Profile,
    ) -> CoefficientSet {
        CoefficientSet::from_profiles(
            tree,
            grid,
            tree.depth(),
            form,
            &b,
            &f,
            &lam,
            &[beta],
            &[bar],
        )
        .unwrap()
    }

    #[test]
    fn laplacian_eigenpair_second_order_accurate() {
        let (tree, grid) = setup(64);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let a = assemble_a(&set, &grid, 0, 0).unwrap();
        let v: Vec<f64> = (0..grid.len()).map(|j| (PI * grid.x(j)).sin()).collect();
        let av = a.apply(&v);
        let mut worst = 0.0f64;
        for j in 0..grid.len() {
            let rel = (av[j] + PI * PI * v[j]).abs() / (PI * PI);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative defect {worst}");
    }

    #[test]
    fn a_is_linear_and_zero_on_zero() {
        let (tree, grid) = setup(16);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.4),
            Profile::Constant(0.2),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let a = assemble_a(&set, &grid, 0, 0).unwrap();
        let zero = vec![0.0; grid.len()];
        assert!(a.apply(&zero).iter().all(|&v| v == 0.0));
        let v: Vec<f64> = (0..grid.len()).map(|j| (j as f64).sin()).collect();
        let w: Vec<f64> = (0..grid.len()).map(|j| (j as f64 * 0.3).cos()).collect();
        let combo: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let lhs = a.apply(&combo);
        let av = a.apply(&v);
        let aw = a.apply(&w);
        for j in 0..grid.len() {
            assert!((lhs[j] - (2.0 * av[j] - 3.0 * aw[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_shifts_diagonal_exactly() {
        let (tree, grid) = setup(12);
        let c = 0.7;
        let with = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(c),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let without = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let aw = assemble_a(&with, &grid, 0, 0).unwrap();
        let ao = assemble_a(&without, &grid, 0, 0).unwrap();
        for j in 0..grid.len() {
            assert_eq!(aw.diag[j], ao.diag[j] - c);
        }
        assert_eq!(aw.sub, ao.sub);
        assert_eq!(aw.sup, ao.sup);
    }

    #[test]
    fn b_operator_examples() {
        let (tree, grid) = setup(16);
        // beta = 0, beta_bar = c -> c * identity
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(2.5),
        );
        let op = assemble_b(&set, &grid, 0, 0, 0).unwrap();
        let v: Vec<f64> = (0..grid.len()).map(|j| j as f64 - 3.0).collect();
        let bv = op.apply(&v);
        for j in 0..grid.len() {
            assert!((bv[j] - 2.5 * v[j]).abs() < 1e-14);
        }

        // beta = 1, beta_bar = 0 on v = x: derivative 1 interiorly
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(1.0),
            Profile::Constant(0.0),
        );
        let op = assemble_b(&set, &grid, 0, 0, 0).unwrap();
        let x: Vec<f64> = grid.coords();
        let bx = op.apply(&x);
        for j in 1..grid.len() - 1 {
            assert!((bx[j] - 1.0).abs() < 1e-12);
        }

        // zero operator
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let op = assemble_b(&set, &grid, 0, 0, 0).unwrap();
        assert!(op.apply(&x).iter().all(|&v| v == 0.0));
        assert!(assemble_b(&set, &grid, 1, 0, 0).is_err());
    }

    #[test]
    fn transpose_adjointness_with_random_vectors() {
        let (tree, grid) = setup(16);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::NonDivergence,
            Profile::Smooth {
                base: 1.5,
                amp: 0.5,
                freq: 2.0,
                rate: 0.0,
            },
            Profile::Constant(0.8),
            Profile::Constant(0.3),
            Profile::Smooth {
                base: 0.0,
                amp: 0.5,
                freq: 1.0,
                rate: 0.0,
            },
            Profile::Constant(0.1),
        );
        let a = assemble_a(&set, &grid, 0, 0).unwrap();
        let astar = assemble_a_star(&set, &grid, 0, 0).unwrap();
        let b = assemble_b(&set, &grid, 0, 0, 0).unwrap();
        let bstar = assemble_b_star(&set, &grid, 0, 0, 0).unwrap();
        let v: Vec<f64> = (0..16).map(|j| (j as f64 * 1.1).sin()).collect();
        let p: Vec<f64> = (0..16).map(|j| (j as f64 * 0.61).cos()).collect();
        assert!((grid.inner(&a.apply(&v), &p) - grid.inner(&v, &astar.apply(&p))).abs() < 1e-12);
        assert!((grid.inner(&b.apply(&v), &p) - grid.inner(&v, &bstar.apply(&p))).abs() < 1e-12);
    }

    #[test]
    fn transpose_equals_analytic_dual_stencil() {
        let (tree, grid) = setup(20);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::NonDivergence,
            Profile::Smooth {
                base: 2.0,
                amp: 0.7,
                freq: 1.0,
                rate: 0.0,
            },
            Profile::Smooth {
                base: 0.5,
                amp: 0.3,
                freq: 3.0,
                rate: 0.0,
            },
            Profile::Constant(0.9),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let t = assemble_a_star(&set, &grid, 0, 0).unwrap();
        let s = analytic_a_star(&set, &grid, 0, 0).unwrap();
        assert_eq!(t.sub, s.sub);
        assert_eq!(t.diag, s.diag);
        assert_eq!(t.sup, s.sup);
    }

    #[test]
    fn b_star_is_minus_b_for_constant_beta() {
        // with constant beta and zero beta_bar, B* = -B away from the
        // boundary rows (integration by parts)
        let (tree, grid) = setup(16);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::NonDivergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.8),
            Profile::Constant(0.0),
        );
        let b = assemble_b(&set, &grid, 0, 0, 0).unwrap();
        let bstar = assemble_b_star(&set, &grid, 0, 0, 0).unwrap();
        for j in 0..grid.len() - 1 {
            assert!((bstar.sup[j] + b.sup[j]).abs() < 1e-15);
            assert!((bstar.sub[j] + b.sub[j]).abs() < 1e-15);
        }
        // lambda contribution on the dual diagonal
        let set_l = profile_set(
            &tree,
            &grid,
            OperatorForm::NonDivergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(1.3),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        let astar = assemble_a_star(&set_l, &grid, 0, 0).unwrap();
        let h = grid.h();
        for j in 0..grid.len() {
            assert!((astar.diag[j] - (-2.0 / (h * h) - 1.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_requires_nondivergence_form() {
        let (tree, grid) = setup(8);
        let set = profile_set(
            &tree,
            &grid,
            OperatorForm::Divergence,
            Profile::Constant(1.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
            Profile::Constant(0.0),
        );
        assert!(assemble_a_star(&set, &grid, 0, 0).is_err());
    }
}
