//! Backward induction solver for the terminal-value problem.
//!
//! One backward step at level t and node: (1) martingale-represent the
//! children of u(., t+1) grid point by grid point, giving the conditional
//! mean m and the integrands chi_i(., t); (2) solve the implicit system
//! `(I - dt A_{t,node}) u(., t, node) = m + dt (phi + sum_i B_i chi_i)` by
//! tridiagonal elimination. The diffusion part is implicit (unconditionally
//! stable); the B_i chi_i coupling is explicit, with the dt <= h monitor
//! reported in the diagnostics.

use crate::coeffs::{CoefficientSet, OperatorForm};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::{assemble_a, assemble_a_slices, assemble_b};
use crate::tree::{AdaptedField, Measurability, ScenarioTree};
use rayon::prelude::*;

/// Node count above which per-level node solves run on the rayon pool.
const PAR_NODE_THRESHOLD: usize = 512;

/// Terminal data for a backward solve: either one grid slice shared by all
/// nodes of the terminal level, or one slice per node.
#[derive(Debug, Clone)]
pub enum TerminalField {
    Deterministic(Vec<f64>),
    PerNode(Vec<Vec<f64>>),
}

impl TerminalField {
    pub fn zeros(grid_len: usize) -> Self {
        TerminalField::Deterministic(vec![0.0; grid_len])
    }

    pub fn at(&self, node: usize) -> &[f64] {
        match self {
            TerminalField::Deterministic(v) => v,
            TerminalField::PerNode(vs) => &vs[node],
        }
    }

    pub fn grid_len(&self) -> usize {
        match self {
            TerminalField::Deterministic(v) => v.len(),
            TerminalField::PerNode(vs) => vs.first().map_or(0, Vec::len),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, TerminalField::Deterministic(_))
    }

    /// Probability-weighted expectation over nodes.
    pub fn expectation(&self) -> Vec<f64> {
        match self {
            TerminalField::Deterministic(v) => v.clone(),
            TerminalField::PerNode(vs) => {
                let mut out = vec![0.0; self.grid_len()];
                let w = 1.0 / vs.len() as f64;
                for v in vs {
                    for (o, &x) in out.iter_mut().zip(v) {
                        *o += w * x;
                    }
                }
                out
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            TerminalField::Deterministic(v) => {
                TerminalField::Deterministic(v.iter().map(|&x| factor * x).collect())
            }
            TerminalField::PerNode(vs) => TerminalField::PerNode(
                vs.iter()
                    .map(|v| v.iter().map(|&x| factor * x).collect())
                    .collect(),
            ),
        }
    }
}

/// Solver options.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Verify superparabolicity before solving.
    pub check_coercivity: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            check_coercivity: true,
        }
    }
}

/// Diagnostics accumulated over a backward sweep.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    /// Largest martingale-representation defect seen (always ~0 for N = 1;
    /// for N >= 2 it carries the non-representable product components of the
    /// child values).
    pub representation_residual: f64,
    /// Whether every implicit row was strictly diagonally dominant.
    pub diag_dominant: bool,
    /// Whether dt <= h held (stability monitor for the explicit coupling).
    pub dt_le_h: bool,
}

/// The adapted pair (u, chi_1..chi_N) produced by a backward solve.
#[derive(Debug, Clone)]
pub struct BspdeSolution {
    /// u on levels 0..=s.
    pub u: AdaptedField,
    /// chi_i on levels 0..s.
    pub chi: Vec<AdaptedField>,
    pub diagnostics: SolveDiagnostics,
    terminal_level: usize,
}

struct NodeStep {
    u: Vec<f64>,
    chi: Vec<Vec<f64>>,
    residual: f64,
    diag_dominant: bool,
}

/// Solve the backward problem with terminal data `terminal` at level `s` and
/// source `phi` (levels 0..s; `None` means zero).
pub fn solve_cauchy_backward(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    s: usize,
    terminal: &TerminalField,
    phi: Option<&AdaptedField>,
    opts: &SolverOptions,
) -> Result<BspdeSolution> {
    let n = grid.len();
    let nb = tree.n_brownian();
    if s < 1 || s > tree.depth() {
        return Err(Error::Domain(format!(
            "terminal level {s} outside 1..={}",
            tree.depth()
        )));
    }
    if terminal.grid_len() != n {
        return Err(Error::ShapeMismatch {
            what: "terminal field grid length",
            expected: n,
            got: terminal.grid_len(),
        });
    }
    if let TerminalField::PerNode(vs) = terminal {
        if vs.len() != tree.nodes_at_level(s) {
            return Err(Error::ShapeMismatch {
                what: "terminal field node count",
                expected: tree.nodes_at_level(s),
                got: vs.len(),
            });
        }
    }
    if coeffs.n_brownian() != nb {
        return Err(Error::ShapeMismatch {
            what: "coefficient Brownian count",
            expected: nb,
            got: coeffs.n_brownian(),
        });
    }
    if coeffs.n_levels() < s {
        return Err(Error::ShapeMismatch {
            what: "coefficient levels",
            expected: s,
            got: coeffs.n_levels(),
        });
    }
    if opts.check_coercivity {
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

    let dt = tree.dt();
    let bc = tree.branch_count();
    let prob = tree.branch_prob();
    let mut u = AdaptedField::zeros(tree, s + 1, n, Measurability::Adapted);
    let mut chi: Vec<AdaptedField> = (0..nb)
        .map(|_| AdaptedField::zeros(tree, s, n, Measurability::Adapted))
        .collect();
    for node in 0..tree.nodes_at_level(s) {
        u.at_mut(s, node).copy_from_slice(terminal.at(node));
    }

    let mut diagnostics = SolveDiagnostics {
        representation_residual: 0.0,
        diag_dominant: true,
        dt_le_h: dt <= grid.h(),
    };

    for t in (0..s).rev() {
        let nodes = tree.nodes_at_level(t);
        let u_next = &u;
        let step = |node: usize| -> Result<NodeStep> {
            // martingale representation of the children, grid point by grid point
            let mut mean = vec![0.0; n];
            let mut chi_loc = vec![vec![0.0; n]; nb];
            for branch in 0..bc {
                let child = tree.child(node, branch);
                let vals = u_next.at(t + 1, child);
                let incr = tree.increment(branch);
                for j in 0..n {
                    mean[j] += prob * vals[j];
                }
                for (i, ci) in chi_loc.iter_mut().enumerate() {
                    let w = prob * incr[i] / dt;
                    for j in 0..n {
                        ci[j] += w * vals[j];
                    }
                }
            }
            let mut residual = 0.0f64;
            for branch in 0..bc {
                let child = tree.child(node, branch);
                let vals = u_next.at(t + 1, child);
                let incr = tree.increment(branch);
                for j in 0..n {
                    let mut recon = mean[j];
                    for i in 0..nb {
                        recon += chi_loc[i][j] * incr[i];
                    }
                    residual = residual.max((vals[j] - recon).abs());
                }
            }

            // rhs = mean + dt (phi + sum_i B_i chi_i)
            let mut rhs = mean;
            if let Some(src) = phi {
                let p = src.at(t, node);
                for j in 0..n {
                    rhs[j] += dt * p[j];
                }
            }
            for (i, ci) in chi_loc.iter().enumerate() {
                let b_op = assemble_b(coeffs, grid, i, t, node)?;
                let bchi = b_op.apply(ci);
                for j in 0..n {
                    rhs[j] += dt * bchi[j];
                }
            }

            let a_op = assemble_a(coeffs, grid, t, node)?;
            let diag_dominant = a_op.implicit_diag_dominant(dt);
            let u_here = a_op.solve_implicit(dt, &rhs)?;
            Ok(NodeStep {
                u: u_here,
                chi: chi_loc,
                residual,
                diag_dominant,
            })
        };

        let results: Vec<NodeStep> = if nodes >= PAR_NODE_THRESHOLD {
            (0..nodes)
                .into_par_iter()
                .map(step)
                .collect::<Result<Vec<_>>>()?
        } else {
            (0..nodes).map(step).collect::<Result<Vec<_>>>()?
        };

        for (node, r) in results.into_iter().enumerate() {
            diagnostics.representation_residual =
                diagnostics.representation_residual.max(r.residual);
            diagnostics.diag_dominant &= r.diag_dominant;
            u.at_mut(t, node).copy_from_slice(&r.u);
            for (i, ci) in r.chi.into_iter().enumerate() {
                chi[i].at_mut(t, node).copy_from_slice(&ci);
            }
        }
    }

    Ok(BspdeSolution {
        u,
        chi,
        diagnostics,
        terminal_level: s,
    })
}

/// `L_s phi`: the solve with zero terminal data.
pub fn operator_l(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    s: usize,
    phi: &AdaptedField,
    opts: &SolverOptions,
) -> Result<BspdeSolution> {
    solve_cauchy_backward(
        tree,
        grid,
        coeffs,
        s,
        &TerminalField::zeros(grid.len()),
        Some(phi),
        opts,
    )
}

/// `Lambda_s Phi`: the solve with zero source.
pub fn operator_lambda(
    tree: &ScenarioTree,
    grid: &Grid,
    coeffs: &CoefficientSet,
    s: usize,
    terminal: &TerminalField,
    opts: &SolverOptions,
) -> Result<BspdeSolution> {
    solve_cauchy_backward(tree, grid, coeffs, s, terminal, None, opts)
}

impl BspdeSolution {
    /// Assemble a trajectory from raw fields (testing and tooling).
    pub fn from_parts(u: AdaptedField, chi: Vec<AdaptedField>, terminal_level: usize) -> Self {
        Self {
            u,
            chi,
            diagnostics: SolveDiagnostics::default(),
            terminal_level,
        }
    }

    pub fn terminal_level(&self) -> usize {
        self.terminal_level
    }

    /// u(., 0) at the root: the initial value of the solution.
    pub fn initial_value(&self) -> &[f64] {
        self.u.at(0, 0)
    }

    /// u(., s) per node of the terminal level.
    pub fn terminal_values(&self, tree: &ScenarioTree) -> Vec<Vec<f64>> {
        (0..tree.nodes_at_level(self.terminal_level))
            .map(|node| self.u.at(self.terminal_level, node).to_vec())
            .collect()
    }

    /// Max-norm defect of the one-step integral identity
    /// `u(t) = u(t+1) + dt (A u(t) + phi(t) + sum B_i chi_i(t)) - sum chi_i(t) dw_i`
    /// over every edge of the tree; by telescoping this bounds the per-path
    /// defect over any time window.
    pub fn integral_identity_residual(
        &self,
        tree: &ScenarioTree,
        grid: &Grid,
        coeffs: &CoefficientSet,
        phi: Option<&AdaptedField>,
    ) -> Result<f64> {
        let n = grid.len();
        let dt = tree.dt();
        let mut worst = 0.0f64;
        for t in 0..self.terminal_level {
            for node in 0..tree.nodes_at_level(t) {
                let a_op = assemble_a(coeffs, grid, t, node)?;
                let au = a_op.apply(self.u.at(t, node));
                let mut drift = vec![0.0; n];
                if let Some(src) = phi {
                    drift.copy_from_slice(src.at(t, node));
                }
                for i in 0..tree.n_brownian() {
                    let b_op = assemble_b(coeffs, grid, i, t, node)?;
                    let bchi = b_op.apply(self.chi[i].at(t, node));
                    for j in 0..n {
                        drift[j] += bchi[j];
                    }
                }
                let u_here = self.u.at(t, node);
                for branch in 0..tree.branch_count() {
                    let child = tree.child(node, branch);
                    let u_child = self.u.at(t + 1, child);
                    let incr = tree.increment(branch);
                    for j in 0..n {
                        let mut stoch = 0.0;
                        for i in 0..tree.n_brownian() {
                            stoch += self.chi[i].at(t, node)[j] * incr[i];
                        }
                        let defect = u_here[j] - u_child[j] - dt * (au[j] + drift[j]) + stoch;
                        worst = worst.max(defect.abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    /// Largest |chi_i| over all levels, nodes, grid points.
    pub fn chi_max_abs(&self, tree: &ScenarioTree) -> f64 {
        let mut worst = 0.0f64;
        for ci in &self.chi {
            for t in 0..self.terminal_level {
                for node in 0..tree.nodes_at_level(t) {
                    for &v in ci.at(t, node) {
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        worst
    }

    /// Discrete energy norms of the solution and of the inputs.
    pub fn energy_norms(
        &self,
        tree: &ScenarioTree,
        grid: &Grid,
        phi: Option<&AdaptedField>,
        terminal: &TerminalField,
    ) -> NormReport {
        let s = self.terminal_level;
        let dt = tree.dt();

        let mean_sq = |field: &AdaptedField, t: usize, h1: bool| -> f64 {
            let stored = field.nodes_stored(t);
            let w = 1.0 / stored as f64;
            let mut acc = 0.0;
            for node in 0..stored {
                let v = field.at(t, node);
                acc += w * if h1 {
                    let g = grid.h1_seminorm(v);
                    g * g
                } else {
                    let m = grid.norm_h(v);
                    m * m
                };
            }
            acc
        };

        let mut u_c0: f64 = 0.0;
        for t in 0..=s {
            u_c0 = u_c0.max(mean_sq(&self.u, t, false).sqrt());
        }
        let mut u_x0_sq = 0.0;
        let mut u_x1_sq = 0.0;
        for t in 0..s {
            let l2 = mean_sq(&self.u, t, false);
            let g2 = mean_sq(&self.u, t, true);
            u_x0_sq += dt * l2;
            u_x1_sq += dt * (l2 + g2);
        }
        let chi_x0: Vec<f64> = self
            .chi
            .iter()
            .map(|ci| {
                let mut acc = 0.0;
                for t in 0..s {
                    acc += dt * mean_sq(ci, t, false);
                }
                acc.sqrt()
            })
            .collect();

        let phi_x0 = phi
            .map(|p| {
                let mut acc = 0.0;
                for t in 0..s {
                    acc += dt * mean_sq(p, t, false);
                }
                acc.sqrt()
            })
            .unwrap_or(0.0);

        let terminal_z0 = {
            let mut acc = 0.0;
            match terminal {
                TerminalField::Deterministic(v) => {
                    let m = grid.norm_h(v);
                    acc = m * m;
                }
                TerminalField::PerNode(vs) => {
                    let w = 1.0 / vs.len() as f64;
                    for v in vs {
                        let m = grid.norm_h(v);
                        acc += w * m * m;
                    }
                }
            }
            acc.sqrt()
        };

        let u_x1 = u_x1_sq.sqrt();
        let u_y1 = u_c0 + u_x1;
        let input = phi_x0 + terminal_z0;
        let solution = u_y1 + chi_x0.iter().sum::<f64>();
        NormReport {
            u_y1,
            u_c0,
            u_x1,
            u_x0: u_x0_sq.sqrt(),
            chi_x0,
            phi_x0,
            terminal_z0,
            ratio: if input > 0.0 { solution / input } else { 0.0 },
        }
    }

    /// Multiply u and chi at level t by `exp(q (T - t dt))`: the exponential
    /// weighting that trades a kappa-contraction for a lambda shift.
    pub fn exponential_weight_transform(&self, tree: &ScenarioTree, q: f64) -> BspdeSolution {
        let dt = tree.dt();
        let horizon = tree.horizon();
        let mut out = self.clone();
        for t in 0..=self.terminal_level {
            let w = (q * (horizon - t as f64 * dt)).exp();
            out.u.scale_level(t, w);
            if t < self.terminal_level {
                for ci in &mut out.chi {
                    ci.scale_level(t, w);
                }
            }
        }
        out
    }
}

/// Energy norms of a solve, mirroring the a-priori estimate
/// `||u||_Y1 + sum ||chi_i||_X0 <= C (||phi|| + ||Phi||)`.
#[derive(Debug, Clone)]
pub struct NormReport {
    pub u_y1: f64,
    pub u_c0: f64,
    pub u_x1: f64,
    pub u_x0: f64,
    pub chi_x0: Vec<f64>,
    pub phi_x0: f64,
    pub terminal_z0: f64,
    /// (||u||_Y1 + sum ||chi_i||) / (||phi|| + ||Phi||)
    pub ratio: f64,
}

/// Deterministic coefficient slices per level, for solves whose data carry no
/// node dependence (the process is then constant across nodes and one slice
/// per level represents it exactly).
#[derive(Debug, Clone)]
pub struct DeterministicCoeffs {
    pub form: OperatorForm,
    pub b: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl DeterministicCoeffs {
    /// Sample deterministic profiles on the grid for levels 0..m.
    pub fn from_profiles(
        grid: &Grid,
        m: usize,
        horizon: f64,
        form: OperatorForm,
        b: &crate::coeffs::Profile,
        drift: &crate::coeffs::Profile,
        lambda: &crate::coeffs::Profile,
    ) -> Result<Self> {
        let dt = horizon / m as f64;
        let sample = |p: &crate::coeffs::Profile| -> Result<Vec<Vec<f64>>> {
            (0..m)
                .map(|t| {
                    (0..grid.len())
                        .map(|j| {
                            p.eval_deterministic(
                                grid.x(j),
                                t as f64 * dt,
                                grid.x_min(),
                                grid.x_max(),
                                horizon,
                            )
                            .ok_or_else(|| {
                                Error::Domain(
                                    "node-random profiles are not valid in a deterministic solve"
                                        .into(),
                                )
                            })
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            form,
            b: sample(b)?,
            drift: sample(drift)?,
            lambda: sample(lambda)?,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.b.len()
    }
}

/// Backward implicit Euler sweep for fully deterministic problems: the
/// chi integrands vanish and a single grid slice per level carries the
/// solution, so fine time grids stay affordable. Returns u on levels 0..=m.
pub fn solve_deterministic_backward(
    grid: &Grid,
    coeffs: &DeterministicCoeffs,
    horizon: f64,
    terminal: &[f64],
    phi: Option<&[Vec<f64>]>,
    m: usize,
) -> Result<Vec<Vec<f64>>> {
    if coeffs.n_levels() < m {
        return Err(Error::ShapeMismatch {
            what: "deterministic coefficient levels",
            expected: m,
            got: coeffs.n_levels(),
        });
    }
    let dt = horizon / m as f64;
    let n = grid.len();
    let mut levels = vec![vec![0.0; n]; m + 1];
    levels[m].copy_from_slice(terminal);
    for t in (0..m).rev() {
        let a_op = assemble_a_slices(
            coeffs.form,
            grid,
            &coeffs.b[t],
            &coeffs.drift[t],
            &coeffs.lambda[t],
            t,
            0,
        )?;
        let mut rhs = levels[t + 1].clone();
        if let Some(src) = phi {
            for j in 0..n {
                rhs[j] += dt * src[t][j];
            }
        }
        levels[t] = a_op.solve_implicit(dt, &rhs)?;
    }
    Ok(levels)
}
