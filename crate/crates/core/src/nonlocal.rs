//! Non-local-in-time boundary machinery.
//!
//! A condition couples the terminal value to the trajectory through a linear
//! functional Gamma: `u(., T) - Gamma u = xi`. With `Q = Gamma Lambda_T` and
//! `T phi = Gamma L_T phi`, the terminal value solves the second-kind fixed
//! point `u(., T) = (I - Q)^{-1} (xi + T phi)` whenever (I - Q) is invertible,
//! and the full solution is recovered by one more backward solve.
//!
//! Conditions targeting a deterministic output (the expectation-reduced
//! families and the scaled-initial condition) admit a J-dimensional reduced
//! fixed point regardless of tree size, because the terminal unknown
//! `Gamma u + xi` is itself deterministic.

use crate::coeffs::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::solver::{operator_l, operator_lambda, BspdeSolution, SolverOptions, TerminalField};
use crate::tree::ScenarioTree;
use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

/// Measurability of the condition output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpace {
    /// Deterministic output: trajectory terms are expectation-reduced, and
    /// the fixed point lives on the grid alone.
    F0,
    /// Path-wise output on the terminal leaves.
    FT,
}

/// Time weights of an integral-in-time term, one value per level 0..M-1
/// (left-endpoint rule, so the support stays strictly before T).
#[derive(Debug, Clone)]
pub enum TimeWeights {
    Constant(f64),
    PerLevel(Vec<f64>),
}

impl TimeWeights {
    fn at(&self, level: usize) -> f64 {
        match self {
            TimeWeights::Constant(c) => *c,
            TimeWeights::PerLevel(v) => v[level],
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        match self {
            TimeWeights::Constant(c) => TimeWeights::Constant(factor * c),
            TimeWeights::PerLevel(v) => {
                TimeWeights::PerLevel(v.iter().map(|&x| factor * x).collect())
            }
        }
    }
}

/// One summand of a non-local condition.
#[derive(Debug, Clone)]
pub enum GammaTerm {
    /// `kappa * u(., 0)`
    ScaledInitial { kappa: f64 },
    /// `weight * K u(., t)` with `t` snapped to the nearest level < M and `K`
    /// an optional h-weighted spatial kernel matrix.
    PointTime {
        time: f64,
        weight: f64,
        kernel: Option<Vec<Vec<f64>>>,
    },
    /// `sum_t dt * k0(t) * u(., t)` over levels 0..M-1.
    TimeKernel { k0: TimeWeights },
}

impl GammaTerm {
    fn scaled(&self, factor: f64) -> Self {
        match self {
            GammaTerm::ScaledInitial { kappa } => GammaTerm::ScaledInitial {
                kappa: factor * kappa,
            },
            GammaTerm::PointTime {
                time,
                weight,
                kernel,
            } => GammaTerm::PointTime {
                time: *time,
                weight: factor * weight,
                kernel: kernel.clone(),
            },
            GammaTerm::TimeKernel { k0 } => GammaTerm::TimeKernel {
                k0: k0.scaled(factor),
            },
        }
    }
}

/// A concrete non-local condition `u(., T) - Gamma u = xi`.
#[derive(Debug, Clone)]
pub struct NonlocalCondition {
    pub terms: Vec<GammaTerm>,
    pub target: TargetSpace,
}

impl NonlocalCondition {
    /// The periodic-type condition `u(., T) - kappa u(., 0) = xi`.
    pub fn scaled_initial(kappa: f64) -> Self {
        Self {
            terms: vec![GammaTerm::ScaledInitial { kappa }],
            target: TargetSpace::F0,
        }
    }

    /// Gamma replaced by `factor * Gamma`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|t| t.scaled(factor)).collect(),
            target: self.target,
        }
    }

    /// Snap distances of every point-time term on this tree.
    pub fn snap_errors(&self, tree: &ScenarioTree) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .filter_map(|t| match t {
                GammaTerm::PointTime { time, .. } => Some(snap_level(tree, *time).map(|(_, e)| e)),
                _ => None,
            })
            .collect()
    }

    /// Short text descriptor for result records.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| match t {
                GammaTerm::ScaledInitial { kappa } => format!("scaled-initial(kappa={kappa})"),
                GammaTerm::PointTime {
                    time,
                    weight,
                    kernel,
                } => format!(
                    "point-time(t={time}, w={weight}{})",
                    if kernel.is_some() { ", kernel" } else { "" }
                ),
                GammaTerm::TimeKernel { .. } => "time-kernel".to_string(),
            })
            .collect();
        let tgt = match self.target {
            TargetSpace::F0 => "F0",
            TargetSpace::FT => "FT",
        };
        format!("[{}] -> {tgt}", parts.join(" + "))
    }
}

/// Snap a time in [0, T) to the nearest level strictly before the terminal
/// one; returns (level, snap distance).
pub fn snap_level(tree: &ScenarioTree, time: f64) -> Result<(usize, f64)> {
    if !(0.0..tree.horizon()).contains(&time) {
        return Err(Error::Domain(format!(
            "condition time {time} outside [0, {})",
            tree.horizon()
        )));
    }
    let raw = (time / tree.dt()).round() as usize;
    let level = raw.min(tree.depth() - 1);
    Ok((level, (time - level as f64 * tree.dt()).abs()))
}

fn apply_kernel(grid: &Grid, kernel: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut out = vec![0.0; n];
    for (j, row) in kernel.iter().enumerate() {
        out[j] = grid.h() * row.iter().zip(v).map(|(k, x)| k * x).sum::<f64>();
    }
    out
}

/// Evaluate `Gamma u` on a solved trajectory. The solution must extend over
/// the whole horizon (terminal level = tree depth).
pub fn apply_gamma(
    cond: &NonlocalCondition,
    tree: &ScenarioTree,
    grid: &Grid,
    sol: &BspdeSolution,
) -> Result<TerminalField> {
    if sol.terminal_level() != tree.depth() {
        return Err(Error::Domain(
            "non-local conditions act on trajectories over the full horizon".into(),
        ));
    }
    let n = grid.len();
    let m = tree.depth();
    let leaves = tree.leaf_count();
    let mut det_acc = vec![0.0; n];
    let mut leaf_acc = match cond.target {
        TargetSpace::F0 => None,
        TargetSpace::FT => Some(vec![vec![0.0; n]; leaves]),
    };

    let add_level_slice =
        |acc_det: &mut Vec<f64>, acc_leaf: &mut Option<Vec<Vec<f64>>>, level: usize, w: f64| {
            match acc_leaf {
                None => {
                    let mean = sol.u.expectation_at(level);
                    for (a, &v) in acc_det.iter_mut().zip(&mean) {
                        *a += w * v;
                    }
                }
                Some(rows) => {
                    for (leaf, row) in rows.iter_mut().enumerate() {
                        let node = tree.ancestor_at(leaf, m, level);
                        let v = sol.u.at(level, node);
                        for (a, &x) in row.iter_mut().zip(v) {
                            *a += w * x;
                        }
                    }
                }
            }
        };

    for term in &cond.terms {
        match term {
            GammaTerm::ScaledInitial { kappa } => {
                let root = sol.u.at(0, 0);
                match &mut leaf_acc {
                    None => {
                        for (a, &v) in det_acc.iter_mut().zip(root) {
                            *a += kappa * v;
                        }
                    }
                    Some(rows) => {
                        for row in rows.iter_mut() {
                            for (a, &v) in row.iter_mut().zip(root) {
                                *a += kappa * v;
                            }
                        }
                    }
                }
            }
            GammaTerm::PointTime {
                time,
                weight,
                kernel,
            } => {
                let (level, _) = snap_level(tree, *time)?;
                match kernel {
                    None => add_level_slice(&mut det_acc, &mut leaf_acc, level, *weight),
                    Some(k) => match &mut leaf_acc {
                        None => {
                            let mean = sol.u.expectation_at(level);
                            let kv = apply_kernel(grid, k, &mean);
                            for (a, v) in det_acc.iter_mut().zip(kv) {
                                *a += weight * v;
                            }
                        }
                        Some(rows) => {
                            for (leaf, row) in rows.iter_mut().enumerate() {
                                let node = tree.ancestor_at(leaf, m, level);
                                let kv = apply_kernel(grid, k, sol.u.at(level, node));
                                for (a, v) in row.iter_mut().zip(kv) {
                                    *a += weight * v;
                                }
                            }
                        }
                    },
                }
            }
            GammaTerm::TimeKernel { k0 } => {
                let dt = tree.dt();
                for level in 0..m {
                    let w = dt * k0.at(level);
                    if w != 0.0 {
                        add_level_slice(&mut det_acc, &mut leaf_acc, level, w);
                    }
                }
            }
        }
    }

    Ok(match leaf_acc {
        None => TerminalField::Deterministic(det_acc),
        Some(mut rows) => {
            for row in rows.iter_mut() {
                for (r, &d) in row.iter_mut().zip(&det_acc) {
                    *r += d;
                }
            }
            TerminalField::PerNode(rows)
        }
    })
}

/// The assembled operator `Q = Gamma Lambda_T` on the discrete terminal
/// space: J-dimensional for deterministic-target conditions, (leaves x J)
/// otherwise.
#[derive(Debug, Clone)]
pub struct QOperator {
    pub matrix: DMatrix<f64>,
    pub target: TargetSpace,
    leaves: usize,
    grid_len: usize,
}

impl QOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_vec(&self, field: &TerminalField) -> DVector<f64> {
        match self.target {
            TargetSpace::F0 => DVector::from_column_slice(field.at(0)),
            TargetSpace::FT => {
                let mut v = DVector::zeros(self.dim());
                for leaf in 0..self.leaves {
                    let s = field.at(leaf);
                    for j in 0..self.grid_len {
                        v[leaf * self.grid_len + j] = s[j];
                    }
                }
                v
            }
        }
    }

    pub fn to_field(&self, v: &DVector<f64>) -> TerminalField {
        match self.target {
            TargetSpace::F0 => TerminalField::Deterministic(v.as_slice().to_vec()),
            TargetSpace::FT => TerminalField::PerNode(
                (0..self.leaves)
                    .map(|leaf| {
                        v.as_slice()[leaf * self.grid_len..(leaf + 1) * self.grid_len].to_vec()
                    })
                    .collect(),
            ),
        }
    }

    /// Full eigenvalue set of the assembled matrix, by decreasing modulus.
    pub fn spectrum(&self) -> Vec<Complex<f64>> {
        let mut eigs = crate::linalg::eigenvalues(&self.matrix);
        eigs.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
        eigs
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectrum().first().map_or(0.0, |e| e.norm())
    }

    /// Distance from the real point `z` to the spectrum.
    pub fn spectral_distance(eigs: &[Complex<f64>], z: f64) -> f64 {
        eigs.iter()
            .map(|e| (e - Complex::new(z, 0.0)).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Options controlling the fixed-point solve.
#[derive(Debug, Clone)]
pub struct NonlocalOptions {
    pub solver: SolverOptions,
    /// Largest admissible dimension of the assembled Q matrix.
    pub max_dim: usize,
    /// Dimension up to which eigenvalues / condition numbers are computed.
    pub eig_max_dim: usize,
    /// Postcondition tolerance on the boundary identity, per leaf.
    pub boundary_tol: f64,
    /// Condition number of (I - Q) above which the problem is declared
    /// singular (the Fredholm alternative fails numerically).
    pub cond_threshold: f64,
    /// Relative stop tolerance of the Neumann iteration.
    pub neumann_tol: f64,
    pub neumann_max_iter: usize,
}

impl Default for NonlocalOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            max_dim: 4096,
            eig_max_dim: 2048,
            boundary_tol: 1e-9,
            cond_threshold: 1e12,
            neumann_tol: 1e-13,
            neumann_max_iter: 100_000,
        }
    }
}

/// Assemble Q column by column: column k is `Gamma Lambda_T e_k` for the k-th
/// basis field of the terminal space.
pub fn assemble_q(
    cond: &NonlocalCondition,
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    opts: &NonlocalOptions,
) -> Result<QOperator> {
    let n = grid.len();
    let leaves = tree.leaf_count();
    let dim = match cond.target {
        TargetSpace::F0 => n,
        TargetSpace::FT => leaves * n,
    };
    if dim > opts.max_dim {
        return Err(Error::BudgetExceeded {
            what: "Q operator dimension (use an expectation-reduced condition or a smaller tree)",
            requested: dim as u128,
            limit: opts.max_dim as u128,
        });
    }
    if opts.solver.check_coercivity {
        let rep = coeffs.check_coercivity(grid);
        if !rep.pass {
            return Err(Error::CoercivityViolated {
                delta: rep.delta,
                x: rep.worst_x,
                level: rep.worst_level,
                node: rep.worst_node,
            });
        }
    }
    let col_opts = SolverOptions {
        check_coercivity: false,
    };

    let basis = |k: usize| -> TerminalField {
        match cond.target {
            TargetSpace::F0 => {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                TerminalField::Deterministic(e)
            }
            TargetSpace::FT => {
                let mut rows = vec![vec![0.0; n]; leaves];
                rows[k / n][k % n] = 1.0;
                TerminalField::PerNode(rows)
            }
        }
    };

    let column = |k: usize| -> Result<Vec<f64>> {
        let sol = operator_lambda(tree, grid, coeffs, tree.depth(), &basis(k), &col_opts)?;
        let g = apply_gamma(cond, tree, grid, &sol)?;
        Ok(match cond.target {
            TargetSpace::F0 => g.at(0).to_vec(),
            TargetSpace::FT => {
                let mut flat = vec![0.0; dim];
                for leaf in 0..leaves {
                    flat[leaf * n..(leaf + 1) * n].copy_from_slice(g.at(leaf));
                }
                flat
            }
        })
    };

    let cols: Vec<Vec<f64>> = if dim >= 32 {
        (0..dim)
            .into_par_iter()
            .map(column)
            .collect::<Result<_>>()?
    } else {
        (0..dim).map(column).collect::<Result<_>>()?
    };
    let matrix = DMatrix::from_fn(dim, dim, |r, c| cols[c][r]);
    Ok(QOperator {
        matrix,
        target: cond.target,
        leaves,
        grid_len: n,
    })
}

/// `T phi = Gamma L_T phi`, returning the functional value and the underlying
/// `L_T phi` solve for reuse.
pub fn apply_t(
    cond: &NonlocalCondition,
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    phi: &crate::tree::AdaptedField,
    opts: &SolverOptions,
) -> Result<(TerminalField, BspdeSolution)> {
    let sol = operator_l(tree, grid, coeffs, tree.depth(), phi, opts)?;
    let g = apply_gamma(cond, tree, grid, &sol)?;
    Ok((g, sol))
}

/// Which linear-algebra route inverts (I - Q).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Dense LU factorization.
    Direct,
    /// Neumann series sum_k Q^k rhs, valid in the contraction regime.
    Neumann,
}

/// Spectral and conditioning data of a fixed-point solve.
#[derive(Debug, Clone, Default)]
pub struct FredholmInfo {
    pub dim: usize,
    pub spectral_radius: Option<f64>,
    pub condition_number: Option<f64>,
    /// (re, im, distance) of the eigenvalue of Q closest to 1.
    pub nearest_eig_to_one: Option<(f64, f64, f64)>,
    pub neumann_iterations: Option<usize>,
    pub contraction_factor: Option<f64>,
    pub snap_errors: Vec<f64>,
}

/// Result of a non-local solve.
#[derive(Debug)]
pub struct NonlocalSolution {
    pub solution: BspdeSolution,
    pub terminal: TerminalField,
    /// Max-norm defect of `u(., T) - Gamma u - xi`, evaluated per leaf.
    pub boundary_residual: f64,
    pub info: FredholmInfo,
}

/// Solve `u(., T) - Gamma u = xi` with source `phi` via the fixed-point
/// formula `u = L_T phi + Lambda_T (I - Q)^{-1}(xi + T phi)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_nonlocal(
    cond: &NonlocalCondition,
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    phi: Option<&crate::tree::AdaptedField>,
    xi: &[f64],
    method: SolveMethod,
    opts: &NonlocalOptions,
) -> Result<NonlocalSolution> {
    let n = grid.len();
    if xi.len() != n {
        return Err(Error::ShapeMismatch {
            what: "xi grid length",
            expected: n,
            got: xi.len(),
        });
    }
    let q = assemble_q(cond, tree, grid, coeffs, opts)?;
    let col_opts = SolverOptions {
        check_coercivity: false,
    };

    let l_phi = phi
        .map(|p| apply_t(cond, tree, grid, coeffs, p, &col_opts))
        .transpose()?;

    // rhs = xi + T phi in the terminal space
    let mut rhs = q.to_vec(&TerminalField::Deterministic(xi.to_vec()));
    if let Some((tphi, _)) = &l_phi {
        rhs += q.to_vec(tphi);
    }

    let mut info = FredholmInfo {
        dim: q.dim(),
        snap_errors: cond.snap_errors(tree)?,
        ..Default::default()
    };

    if q.dim() <= opts.eig_max_dim {
        let e = q.spectrum();
        info.spectral_radius = e.first().map(|c| c.norm());
        let d = QOperator::spectral_distance(&e, 1.0);
        let near = e
            .iter()
            .min_by(|a, b| {
                (*a - Complex::new(1.0, 0.0))
                    .norm()
                    .total_cmp(&(*b - Complex::new(1.0, 0.0)).norm())
            })
            .copied()
            .unwrap_or(Complex::new(0.0, 0.0));
        info.nearest_eig_to_one = Some((near.re, near.im, d));
    }

    let i_minus_q = DMatrix::identity(q.dim(), q.dim()) - &q.matrix;
    if q.dim() <= opts.eig_max_dim {
        let cond_num = crate::linalg::condition_number(&i_minus_q).unwrap_or(f64::NAN);
        info.condition_number = Some(cond_num);
        if cond_num > opts.cond_threshold {
            let (re, im, d) = info
                .nearest_eig_to_one
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            return Err(Error::FredholmSingular {
                condition: cond_num,
                nearest_re: re,
                nearest_im: im,
                distance: d,
            });
        }
    }

    let terminal_vec = match method {
        SolveMethod::Direct => i_minus_q.lu().solve(&rhs).ok_or_else(|| {
            let (re, im, d) = info
                .nearest_eig_to_one
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            Error::FredholmSingular {
                condition: f64::INFINITY,
                nearest_re: re,
                nearest_im: im,
                distance: d,
            }
        })?,
        SolveMethod::Neumann => {
            if let Some(rho) = info.spectral_radius {
                if rho >= 1.0 {
                    return Err(Error::NeumannDiverged {
                        iterations: 0,
                        factor: rho,
                    });
                }
            }
            let scale = rhs.amax().max(1.0);
            let mut x = rhs.clone();
            let mut increment = &q.matrix * &rhs;
            let first_norm = increment.amax();
            let mut last_norm = first_norm;
            let mut iters = 0usize;
            let mut growth_streak = 0usize;
            while increment.amax() > opts.neumann_tol * scale {
                x += &increment;
                increment = &q.matrix * &increment;
                iters += 1;
                let norm = increment.amax();
                if norm > last_norm {
                    growth_streak += 1;
                    if growth_streak > 20 {
                        return Err(Error::NeumannDiverged {
                            iterations: iters,
                            factor: norm / last_norm.max(f64::MIN_POSITIVE),
                        });
                    }
                } else {
                    growth_streak = 0;
                }
                last_norm = norm;
                if iters > opts.neumann_max_iter {
                    return Err(Error::NeumannDiverged {
                        iterations: iters,
                        factor: (last_norm / first_norm.max(f64::MIN_POSITIVE))
                            .powf(1.0 / iters as f64),
                    });
                }
            }
            info.neumann_iterations = Some(iters);
            if iters > 1 && first_norm > 0.0 && last_norm > 0.0 {
                info.contraction_factor =
                    Some((last_norm / first_norm).powf(1.0 / (iters - 1) as f64));
            }
            x
        }
    };

    let terminal = q.to_field(&terminal_vec);
    let mut solution = operator_lambda(tree, grid, coeffs, tree.depth(), &terminal, &col_opts)?;
    if let Some((_, lsol)) = l_phi {
        solution.u.add_assign_field(&lsol.u);
        for (mine, theirs) in solution.chi.iter_mut().zip(&lsol.chi) {
            mine.add_assign_field(theirs);
        }
        solution.diagnostics.representation_residual = solution
            .diagnostics
            .representation_residual
            .max(lsol.diagnostics.representation_residual);
        solution.diagnostics.diag_dominant &= lsol.diagnostics.diag_dominant;
    }

    // postcondition: the boundary identity per leaf
    let gamma_u = apply_gamma(cond, tree, grid, &solution)?;
    let mut boundary_residual = 0.0f64;
    for leaf in 0..tree.leaf_count() {
        let ut = terminal.at(leaf);
        let gu = gamma_u.at(leaf);
        for j in 0..n {
            boundary_residual = boundary_residual.max((ut[j] - gu[j] - xi[j]).abs());
        }
    }
    if boundary_residual > opts.boundary_tol {
        return Err(Error::Inconsistency(format!(
            "boundary identity residual {boundary_residual:.3e} exceeds {:.3e}",
            opts.boundary_tol
        )));
    }

    Ok(NonlocalSolution {
        solution,
        terminal,
        boundary_residual,
        info,
    })
}

/// One row of an epsilon-perturbation sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub eps: f64,
    /// Distance from 1/(1+eps) to the spectrum of Q.
    pub eig_distance: f64,
    /// Row skipped because 1/(1+eps) is (numerically) an eigenvalue of Q.
    pub flagged: bool,
    pub solvable: bool,
    pub condition_number: f64,
    /// Algebraic residual of the perturbed fixed-point equation.
    pub residual: f64,
    /// Max-norm of the terminal solution (for cross-checks).
    pub terminal_norm: f64,
}

/// Replace Gamma by `(1 + eps) Gamma` across a grid of eps values and record
/// the solvability pattern. Rows whose 1/(1+eps) lies within `flag_tol` of
/// the spectrum of Q are flagged and not solved.
#[allow(clippy::too_many_arguments)]
pub fn sweep_epsilon(
    cond: &NonlocalCondition,
    eps_grid: &[f64],
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    phi: Option<&crate::tree::AdaptedField>,
    xi: &[f64],
    flag_tol: f64,
    opts: &NonlocalOptions,
) -> Result<Vec<SweepRow>> {
    let q = assemble_q(cond, tree, grid, coeffs, opts)?;
    let eigs = q.spectrum();
    let col_opts = SolverOptions {
        check_coercivity: false,
    };
    let tphi = phi
        .map(|p| apply_t(cond, tree, grid, coeffs, p, &col_opts))
        .transpose()?
        .map(|(t, _)| q.to_vec(&t));
    let xi_vec = q.to_vec(&TerminalField::Deterministic(xi.to_vec()));
    let identity = DMatrix::identity(q.dim(), q.dim());

    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let scale = 1.0 + eps;
        let target = 1.0 / scale;
        let dist = QOperator::spectral_distance(&eigs, target);
        if dist < flag_tol {
            rows.push(SweepRow {
                eps,
                eig_distance: dist,
                flagged: true,
                solvable: false,
                condition_number: f64::INFINITY,
                residual: f64::NAN,
                terminal_norm: f64::NAN,
            });
            continue;
        }
        let mut rhs = xi_vec.clone();
        if let Some(t) = &tphi {
            rhs += t * scale;
        }
        let m_eps = &identity - &(&q.matrix * scale);
        let cond_num = crate::linalg::condition_number(&m_eps).unwrap_or(f64::NAN);
        match m_eps.clone().lu().solve(&rhs) {
            Some(x) => {
                let residual = (&m_eps * &x - &rhs).amax();
                rows.push(SweepRow {
                    eps,
                    eig_distance: dist,
                    flagged: false,
                    solvable: true,
                    condition_number: cond_num,
                    residual,
                    terminal_norm: x.amax(),
                });
            }
            None => rows.push(SweepRow {
                eps,
                eig_distance: dist,
                flagged: false,
                solvable: false,
                condition_number: cond_num,
                residual: f64::NAN,
                terminal_norm: f64::NAN,
            }),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{node_noise, CoefficientSet, OperatorForm, Profile};
    use crate::tree::{AdaptedField, Measurability};
    use std::f64::consts::PI;

    fn heat_setup(
        m: usize,
        j: usize,
        horizon: f64,
        lambda: f64,
        b: f64,
    ) -> (ScenarioTree, Grid, CoefficientSet) {
        let tree = ScenarioTree::build(m, 1, horizon).unwrap();
        let grid = Grid::new(0.0, 1.0, j).unwrap();
        let coeffs = CoefficientSet::from_profiles(
            &tree,
            &grid,
            m,
            OperatorForm::NonDivergence,
            &Profile::Constant(b),
            &Profile::Constant(0.0),
            &Profile::Constant(lambda),
            &[Profile::Constant(0.0)],
            &[Profile::Constant(0.0)],
        )
        .unwrap();
        (tree, grid, coeffs)
    }

    /// A trajectory with prescribed values u(., t) = g(t) * v.
    fn synthetic_trajectory(
        tree: &ScenarioTree,
        grid: &Grid,
        v: &[f64],
        g: impl Fn(f64) -> f64,
    ) -> crate::solver::BspdeSolution {
        let m = tree.depth();
        let dt = tree.dt();
        let u = AdaptedField::from_fn(
            tree,
            m + 1,
            grid.len(),
            Measurability::Adapted,
            |t, _, j| g(t as f64 * dt) * v[j],
        );
        let chi = vec![AdaptedField::zeros(
            tree,
            m,
            grid.len(),
            Measurability::Adapted,
        )];
        crate::solver::BspdeSolution::from_parts(u, chi, m)
    }

    #[test]
    fn gamma_examples_on_synthetic_trajectories() {
        let (tree, grid, _) = heat_setup(4, 8, 1.0, 0.0, 0.5);
        let v: Vec<f64> = (0..8).map(|j| (j as f64 * 0.7).sin() + 2.0).collect();

        // scaled-initial with kappa 1 on a constant-in-time field returns it
        let sol = synthetic_trajectory(&tree, &grid, &v, |_| 1.0);
        let g = apply_gamma(&NonlocalCondition::scaled_initial(1.0), &tree, &grid, &sol).unwrap();
        for j in 0..8 {
            assert!((g.at(0)[j] - v[j]).abs() < 1e-15);
        }

        // time kernel k0 = 1/T averages a constant field to itself
        let cond = NonlocalCondition {
            terms: vec![GammaTerm::TimeKernel {
                k0: TimeWeights::Constant(1.0),
            }],
            target: TargetSpace::F0,
        };
        let g = apply_gamma(&cond, &tree, &grid, &sol).unwrap();
        for j in 0..8 {
            assert!((g.at(0)[j] - v[j]).abs() < 1e-14);
        }

        // point times {(0, 1/2), (T/2, 1/2)} on u(., t) = t v give (T/4) v
        let sol_t = synthetic_trajectory(&tree, &grid, &v, |t| t);
        let cond = NonlocalCondition {
            terms: vec![
                GammaTerm::PointTime {
                    time: 0.0,
                    weight: 0.5,
                    kernel: None,
                },
                GammaTerm::PointTime {
                    time: 0.5,
                    weight: 0.5,
                    kernel: None,
                },
            ],
            target: TargetSpace::F0,
        };
        let g = apply_gamma(&cond, &tree, &grid, &sol_t).unwrap();
        for j in 0..8 {
            assert!((g.at(0)[j] - 0.25 * v[j]).abs() < 1e-14);
        }

        // a time outside [0, T) is a domain error
        let bad = NonlocalCondition {
            terms: vec![GammaTerm::PointTime {
                time: 1.0,
                weight: 1.0,
                kernel: None,
            }],
            target: TargetSpace::F0,
        };
        assert!(matches!(
            apply_gamma(&bad, &tree, &grid, &sol),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn q_columns_match_independent_resolves() {
        let tree = ScenarioTree::build(5, 1, 1.0).unwrap();
        let grid = Grid::new(0.0, 1.0, 14).unwrap();
        let coeffs = CoefficientSet::from_profiles(
            &tree,
            &grid,
            5,
            OperatorForm::NonDivergence,
            &Profile::NodeRandom {
                base: 0.8,
                amp: 0.1,
                seed: 5,
            },
            &Profile::Constant(0.1),
            &Profile::Constant(0.6),
            &[Profile::Constant(0.2)],
            &[Profile::Constant(0.1)],
        )
        .unwrap();
        let kappa = 0.9;
        let cond = NonlocalCondition::scaled_initial(kappa);
        let opts = NonlocalOptions::default();
        let q = assemble_q(&cond, &tree, &grid, &coeffs, &opts).unwrap();
        for &col in &[0usize, 7, 13] {
            let mut e = vec![0.0; grid.len()];
            e[col] = 1.0;
            let sol = crate::solver::operator_lambda(
                &tree,
                &grid,
                &coeffs,
                5,
                &TerminalField::Deterministic(e),
                &SolverOptions::default(),
            )
            .unwrap();
            for row in 0..grid.len() {
                let expect = kappa * sol.u.at(0, 0)[row];
                assert!(
                    (q.matrix[(row, col)] - expect).abs() <= 1e-12,
                    "column {col} row {row}"
                );
            }
        }
    }

    #[test]
    fn zero_gamma_gives_zero_q_and_spectrum() {
        let (tree, grid, coeffs) = heat_setup(4, 8, 1.0, 0.5, 0.5);
        let cond = NonlocalCondition::scaled_initial(0.0);
        let q = assemble_q(&cond, &tree, &grid, &coeffs, &NonlocalOptions::default()).unwrap();
        assert!(q.matrix.iter().all(|&v| v == 0.0));
        let eigs = q.spectrum();
        assert!(eigs.iter().all(|e| e.norm() < 1e-14));
    }

    #[test]
    fn heat_spectrum_real_and_below_semigroup_bound() {
        // strong killing: the spectral radius of Q at kappa = 1 must fall
        // strictly below exp(-c T)
        let c = 10.0;
        let (tree, grid, coeffs) = heat_setup(10, 24, 1.0, c, 1.0);
        let cond = NonlocalCondition::scaled_initial(1.0);
        let q = assemble_q(&cond, &tree, &grid, &coeffs, &NonlocalOptions::default()).unwrap();
        let eigs = q.spectrum();
        for e in &eigs {
            assert!(e.im.abs() < 1e-10, "eigenvalue {e} not real");
            assert!(e.re > -1e-12 && e.re < (-c * 1.0f64).exp());
        }
    }

    #[test]
    fn zero_data_yields_zero_solution() {
        let (tree, grid, coeffs) = heat_setup(5, 10, 1.0, 1.0, 0.5);
        let cond = NonlocalCondition::scaled_initial(1.0);
        let sol = solve_nonlocal(
            &cond,
            &tree,
            &grid,
            &coeffs,
            None,
            &vec![0.0; grid.len()],
            SolveMethod::Direct,
            &NonlocalOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.boundary_residual, 0.0);
        for t in 0..=tree.depth() {
            for node in 0..tree.nodes_at_level(t) {
                assert!(sol.solution.u.at(t, node).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn neumann_agrees_with_direct_in_contraction_regime() {
        let (tree, grid, coeffs) = heat_setup(5, 12, 1.0, 0.8, 0.5);
        let cond = NonlocalCondition::scaled_initial(1.0);
        let xi: Vec<f64> = (0..grid.len()).map(|j| (PI * grid.x(j)).sin()).collect();
        let opts = NonlocalOptions::default();
        let phi = AdaptedField::from_fn(
            &tree,
            5,
            grid.len(),
            Measurability::Adapted,
            |t, node, j| node_noise(3, t * 100 + j, node),
        );
        let a = solve_nonlocal(
            &cond,
            &tree,
            &grid,
            &coeffs,
            Some(&phi),
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap();
        let b = solve_nonlocal(
            &cond,
            &tree,
            &grid,
            &coeffs,
            Some(&phi),
            &xi,
            SolveMethod::Neumann,
            &opts,
        )
        .unwrap();
        for j in 0..grid.len() {
            assert!((a.terminal.at(0)[j] - b.terminal.at(0)[j]).abs() <= 1e-8);
        }
        assert!(b.info.neumann_iterations.unwrap() > 0);
    }

    #[test]
    fn ft_target_agrees_with_reduced_path_for_scaled_initial() {
        // the same scaled-initial condition solved in the full leaf space
        // must reproduce the reduced deterministic fixed point
        let (tree, grid, coeffs) = heat_setup(4, 8, 1.0, 1.0, 0.5);
        let xi: Vec<f64> = (0..grid.len()).map(|j| 0.3 + 0.1 * j as f64).collect();
        let opts = NonlocalOptions::default();
        let reduced = solve_nonlocal(
            &NonlocalCondition::scaled_initial(0.9),
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap();
        let full_cond = NonlocalCondition {
            terms: vec![GammaTerm::ScaledInitial { kappa: 0.9 }],
            target: TargetSpace::FT,
        };
        let full = solve_nonlocal(
            &full_cond,
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap();
        for leaf in 0..tree.leaf_count() {
            for j in 0..grid.len() {
                assert!((full.terminal.at(leaf)[j] - reduced.terminal.at(0)[j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn budget_and_singularity_errors() {
        let (tree, grid, coeffs) = heat_setup(6, 16, 1.0, 0.0, 0.5);
        // full leaf space 64 * 16 = 1024 over a small budget
        let cond_ft = NonlocalCondition {
            terms: vec![GammaTerm::ScaledInitial { kappa: 1.0 }],
            target: TargetSpace::FT,
        };
        let tight = NonlocalOptions {
            max_dim: 256,
            ..NonlocalOptions::default()
        };
        assert!(matches!(
            assemble_q(&cond_ft, &tree, &grid, &coeffs, &tight),
            Err(Error::BudgetExceeded { .. })
        ));

        // engineer an eigenvalue exactly at 1: the Fredholm alternative fails
        let opts = NonlocalOptions::default();
        let q1 = assemble_q(
            &NonlocalCondition::scaled_initial(1.0),
            &tree,
            &grid,
            &coeffs,
            &opts,
        )
        .unwrap();
        let kappa = 1.0 / q1.spectral_radius();
        let xi = vec![1.0; grid.len()];
        let err = solve_nonlocal(
            &NonlocalCondition::scaled_initial(kappa),
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap_err();
        match err {
            Error::FredholmSingular { distance, .. } => {
                assert!(distance < 1e-8, "nearest eigenvalue distance {distance}")
            }
            other => panic!("expected a singularity error, got {other}"),
        }

        // Neumann outside the contraction regime is rejected
        let err = solve_nonlocal(
            &NonlocalCondition::scaled_initial(2.0 * kappa),
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Neumann,
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NeumannDiverged { .. }));
    }

    #[test]
    fn sweep_consistent_with_scaled_solve() {
        let (tree, grid, coeffs) = heat_setup(5, 12, 1.0, 1.5, 0.5);
        let cond = NonlocalCondition::scaled_initial(1.0);
        let xi: Vec<f64> = (0..grid.len()).map(|j| (PI * grid.x(j)).sin()).collect();
        let opts = NonlocalOptions::default();
        let rows = sweep_epsilon(
            &cond,
            &[-0.2, 0.0, 0.2],
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            1e-6,
            &opts,
        )
        .unwrap();
        assert!(rows.iter().all(|r| r.solvable && !r.flagged));
        // the eps = 0.2 row reproduces the solve with Gamma scaled by 1.2
        let scaled = solve_nonlocal(
            &cond.scaled(1.2),
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap();
        let mut norm = 0.0f64;
        for j in 0..grid.len() {
            norm = norm.max(scaled.terminal.at(0)[j].abs());
        }
        assert!((rows[2].terminal_norm - norm).abs() <= 1e-12);
        // and the eps = 0 row reproduces the unscaled solve
        let base = solve_nonlocal(
            &cond,
            &tree,
            &grid,
            &coeffs,
            None,
            &xi,
            SolveMethod::Direct,
            &opts,
        )
        .unwrap();
        let mut norm0 = 0.0f64;
        for j in 0..grid.len() {
            norm0 = norm0.max(base.terminal.at(0)[j].abs());
        }
        assert!((rows[1].terminal_norm - norm0).abs() <= 1e-12);
    }

    #[test]
    fn snapping_reports_distance() {
        let tree = ScenarioTree::build(8, 1, 1.0).unwrap();
        let (level, err) = snap_level(&tree, 0.3).unwrap();
        assert_eq!(level, 2); // 0.3 / 0.125 = 2.4 -> level 2
        assert!((err - 0.05).abs() < 1e-12);
        assert!(snap_level(&tree, -0.1).is_err());
        assert!(snap_level(&tree, 1.0).is_err());
        // a time just below T snaps back to the last admissible level
        let (level, err) = snap_level(&tree, 0.99).unwrap();
        assert_eq!(level, 7);
        assert!(err > 0.1);
    }
}
