//! Coefficient fields for the parabolic operator and its stochastic terms.
//!
//! The second-order operator comes in two presentations:
//! divergence form `(b v')' + f v' - lambda v` and non-divergence form
//! `b v'' + f_hat v' - lambda v` with `f_hat = f + b'`. The dual machinery
//! requires the non-divergence presentation.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tree::{AdaptedField, Measurability, ScenarioTree};

/// Which presentation of the second-order operator the drift field refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorForm {
    /// `(b v')' + f v' - lambda v`
    Divergence,
    /// `b v'' + f_hat v' - lambda v`
    NonDivergence,
}

/// A named scalar coefficient profile, evaluable on the grid per tree node.
#[derive(Debug, Clone)]
pub enum Profile {
    Constant(f64),
    /// `base + amp * sin(pi * freq * (x - x_min)/(x_max - x_min)) * cos(pi * rate * t / T)`
    Smooth {
        base: f64,
        amp: f64,
        freq: f64,
        rate: f64,
    },
    /// `base + amp * u(level, node)` with `u` a deterministic hash into
    /// [-1, 1]; node-dependent, hence adapted, constant in x.
    NodeRandom {
        base: f64,
        amp: f64,
        seed: u64,
    },
}

impl Profile {
    pub fn constant(c: f64) -> Self {
        Profile::Constant(c)
    }

    /// Whether the profile depends on the tree node.
    pub fn is_random(&self) -> bool {
        matches!(self, Profile::NodeRandom { .. })
    }

    /// Point evaluation for deterministic profiles; `None` for node-random ones.
    pub fn eval_deterministic(
        &self,
        x: f64,
        t: f64,
        x_min: f64,
        x_max: f64,
        horizon: f64,
    ) -> Option<f64> {
        match *self {
            Profile::Constant(c) => Some(c),
            Profile::Smooth {
                base,
                amp,
                freq,
                rate,
            } => {
                let xi = (x - x_min) / (x_max - x_min);
                Some(
                    base + amp
                        * (std::f64::consts::PI * freq * xi).sin()
                        * (std::f64::consts::PI * rate * t / horizon).cos(),
                )
            }
            Profile::NodeRandom { .. } => None,
        }
    }

    /// Evaluation at a grid point and tree node.
    pub fn eval_on_tree(
        &self,
        grid: &Grid,
        x: f64,
        t: f64,
        horizon: f64,
        level: usize,
        node: usize,
    ) -> f64 {
        match *self {
            Profile::NodeRandom { base, amp, seed } => base + amp * node_noise(seed, level, node),
            _ => self
                .eval_deterministic(x, t, grid.x_min(), grid.x_max(), horizon)
                .unwrap(),
        }
    }
}

/// Deterministic hash of (seed, level, node) into [-1, 1].
pub fn node_noise(seed: u64, level: usize, node: usize) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((level as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((node as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z as f64 / u64::MAX as f64) * 2.0 - 1.0
}

/// Report of the superparabolicity check `b - (1/2) sum_i beta_i^2 >= delta`.
#[derive(Debug, Clone)]
pub struct CoercivityReport {
    /// Smallest margin achieved over all (x, level, node).
    pub delta: f64,
    pub worst_x: f64,
    pub worst_level: usize,
    pub worst_node: usize,
    pub pass: bool,
}

/// The coefficient fields b, drift, lambda, beta_i, beta_bar_i sampled on the
/// grid per (level, node), together with the operator presentation tag.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub form: OperatorForm,
    pub b: AdaptedField,
    /// `f` in divergence form, `f_hat` in non-divergence form.
    pub drift: AdaptedField,
    /// `lambda` (divergence) or `lambda_tilde` (non-divergence).
    pub lambda: AdaptedField,
    pub beta: Vec<AdaptedField>,
    pub beta_bar: Vec<AdaptedField>,
}

impl CoefficientSet {
    /// Sample profiles on the grid for all levels `0..n_levels` of the tree.
    #[allow(clippy::too_many_arguments)]
    pub fn from_profiles(
        tree: &ScenarioTree,
        grid: &Grid,
        n_levels: usize,
        form: OperatorForm,
        b: &Profile,
        drift: &Profile,
        lambda: &Profile,
        beta: &[Profile],
        beta_bar: &[Profile],
    ) -> Result<Self> {
        if beta.len() != tree.n_brownian() || beta_bar.len() != tree.n_brownian() {
            return Err(Error::ShapeMismatch {
                what: "beta / beta_bar profiles",
                expected: tree.n_brownian(),
                got: beta.len().min(beta_bar.len()),
            });
        }
        let sample = |p: &Profile| -> Result<AdaptedField> {
            let meas = if p.is_random() {
                Measurability::Adapted
            } else {
                Measurability::Deterministic
            };
            let field = AdaptedField::from_fn(tree, n_levels, grid.len(), meas, |t, node, j| {
                p.eval_on_tree(
                    grid,
                    grid.x(j),
                    t as f64 * tree.dt(),
                    tree.horizon(),
                    t,
                    node,
                )
            });
            for t in 0..n_levels {
                for node in 0..field.nodes_stored(t) {
                    if field.at(t, node).iter().any(|v| !v.is_finite()) {
                        return Err(Error::Coefficient(format!(
                            "non-finite coefficient value at level {t}"
                        )));
                    }
                }
            }
            Ok(field)
        };
        Ok(Self {
            form,
            b: sample(b)?,
            drift: sample(drift)?,
            lambda: sample(lambda)?,
            beta: beta.iter().map(&sample).collect::<Result<_>>()?,
            beta_bar: beta_bar.iter().map(&sample).collect::<Result<_>>()?,
        })
    }

    pub fn n_brownian(&self) -> usize {
        self.beta.len()
    }

    pub fn n_levels(&self) -> usize {
        self.b.n_levels()
    }

    pub fn grid_len(&self) -> usize {
        self.b.grid_len()
    }

    /// True when every field is deterministic (no node dependence).
    pub fn is_deterministic(&self) -> bool {
        let det = |f: &AdaptedField| f.measurability() != Measurability::Adapted;
        det(&self.b)
            && det(&self.drift)
            && det(&self.lambda)
            && self.beta.iter().all(det)
            && self.beta_bar.iter().all(det)
    }

    /// Superparabolicity margin `min b - (1/2) sum beta_i^2` over every
    /// (x, level, node) at which the fields are stored.
    pub fn check_coercivity(&self, grid: &Grid) -> CoercivityReport {
        let mut delta = f64::INFINITY;
        let (mut wx, mut wl, mut wn) = (grid.x(0), 0, 0);
        for level in 0..self.n_levels() {
            let nodes = self.stored_nodes(level);
            for node in 0..nodes {
                let b = self.b.at(level, node);
                for j in 0..grid.len() {
                    let mut s = 0.0;
                    for beta in &self.beta {
                        let v = beta.at(level, node)[j];
                        s += v * v;
                    }
                    let margin = b[j] - 0.5 * s;
                    if margin < delta {
                        delta = margin;
                        wx = grid.x(j);
                        wl = level;
                        wn = node;
                    }
                }
            }
        }
        CoercivityReport {
            delta,
            worst_x: wx,
            worst_level: wl,
            worst_node: wn,
            pass: delta > 0.0,
        }
    }

    /// Largest node count any field actually stores at `level`.
    fn stored_nodes(&self, level: usize) -> usize {
        let mut n = self.b.nodes_stored(level);
        n = n.max(self.drift.nodes_stored(level));
        n = n.max(self.lambda.nodes_stored(level));
        for f in self.beta.iter().chain(self.beta_bar.iter()) {
            n = n.max(f.nodes_stored(level));
        }
        n
    }

    /// Corrected drift `f_tilde = f_hat - sum_i beta_bar_i * beta_i` at a slice.
    pub fn f_tilde_at(&self, level: usize, node: usize) -> Vec<f64> {
        let f = self.drift.at(level, node);
        let mut out = f.to_vec();
        for i in 0..self.n_brownian() {
            let bb = self.beta_bar[i].at(level, node);
            let be = self.beta[i].at(level, node);
            for (o, (&a, &b)) in out.iter_mut().zip(bb.iter().zip(be)) {
                *o -= a * b;
            }
        }
        out
    }

    /// Auxiliary diffusion `beta_tilde = sqrt(2b - sum_i beta_i^2)`; fails if
    /// the argument of the square root is not strictly positive.
    pub fn beta_tilde_at(&self, level: usize, node: usize) -> Result<Vec<f64>> {
        let b = self.b.at(level, node);
        let mut out = Vec::with_capacity(b.len());
        for j in 0..b.len() {
            let mut s = 0.0;
            for beta in &self.beta {
                let v = beta.at(level, node)[j];
                s += v * v;
            }
            let arg = 2.0 * b[j] - s;
            if arg <= 0.0 {
                return Err(Error::Coefficient(format!(
                    "2b - sum beta_i^2 = {arg:.6e} at grid index {j}, level {level}: \
                     the diffusion split requires strict positivity"
                )));
            }
            out.push(arg.sqrt());
        }
        Ok(out)
    }

    /// Whether every beta_i vanishes on the two grid cells adjacent to the
    /// boundary, as the almost-sure periodicity theory requires.
    pub fn beta_vanishes_at_boundary(&self) -> bool {
        let j = self.grid_len();
        for beta in &self.beta {
            for level in 0..self.n_levels() {
                for node in 0..beta.nodes_stored(level) {
                    let s = beta.at(level, node);
                    if s[0] != 0.0 || s[j - 1] != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Convert a divergence-form set to non-divergence form:
    /// `f_hat = f + b'` with `b'` by centered differences (one-sided at the
    /// first and last interior points). The operator itself is unchanged up
    /// to O(h^2).
    pub fn to_nondivergence(&self, grid: &Grid) -> Result<CoefficientSet> {
        if self.form == OperatorForm::NonDivergence {
            return Ok(self.clone());
        }
        let h = grid.h();
        let n = grid.len();
        let mut drift = self.drift.clone();
        for level in 0..self.n_levels() {
            let nodes = drift.nodes_stored(level).max(self.b.nodes_stored(level));
            // if b is adapted but f deterministic the result must be adapted
            if self.b.nodes_stored(level) > drift.nodes_stored(level) {
                return Err(Error::Inconsistency(
                    "divergence-to-nondivergence conversion with adapted b \
                     requires an adapted drift field"
                        .into(),
                ));
            }
            for node in 0..nodes {
                let b = self.b.at(level, node).to_vec();
                let f = drift.at_mut(level, node);
                for j in 0..n {
                    let db = if j == 0 {
                        (b[1] - b[0]) / h
                    } else if j == n - 1 {
                        (b[n - 1] - b[n - 2]) / h
                    } else {
                        (b[j + 1] - b[j - 1]) / (2.0 * h)
                    };
                    f[j] += db;
                }
            }
        }
        Ok(CoefficientSet {
            form: OperatorForm::NonDivergence,
            b: self.b.clone(),
            drift,
            lambda: self.lambda.clone(),
            beta: self.beta.clone(),
            beta_bar: self.beta_bar.clone(),
        })
    }
}
