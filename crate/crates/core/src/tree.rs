//! Finite filtered probability space.
//!
//! The driving noise is an N-component discrete Brownian motion on a full
//! (non-recombining) tree: every node branches into 2^N children, one per
//! sign combination of the N increments, each increment being +/- sqrt(dt).
//! This matches the first two moments of Brownian increments, keeps the
//! space finite, and makes the one-step martingale representation an
//! exact linear solve for N = 1.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default cap on the number of leaf nodes of a tree.
pub const DEFAULT_NODE_BUDGET: u128 = 1 << 20;

/// Hard cap on the number of driving Brownian components.
pub const MAX_BROWNIAN: usize = 3;

/// Binary-per-component scenario tree over `[0, T]` with `depth` time steps.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    depth: usize,
    n_brownian: usize,
    horizon: f64,
    dt: f64,
    /// increments[branch][component] = +/- sqrt(dt); bit `i` of `branch`
    /// selects the sign of component `i`.
    increments: Vec<Vec<f64>>,
}

impl ScenarioTree {
    /// Build a tree with `depth` steps, `n_brownian` components and horizon `horizon`,
    /// rejecting trees whose leaf count exceeds `node_budget`.
    pub fn with_budget(
        depth: usize,
        n_brownian: usize,
        horizon: f64,
        node_budget: u128,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Domain("tree depth must be at least 1".into()));
        }
        if n_brownian < 1 {
            return Err(Error::Domain(
                "at least one Brownian component is required".into(),
            ));
        }
        if n_brownian > MAX_BROWNIAN {
            return Err(Error::Domain(format!(
                "n_brownian = {n_brownian} exceeds the supported maximum {MAX_BROWNIAN}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Domain("horizon must be positive".into()));
        }
        let leaves = (1u128 << n_brownian)
            .checked_pow(depth as u32)
            .unwrap_or(u128::MAX);
        if leaves > node_budget {
            return Err(Error::BudgetExceeded {
                what: "scenario tree leaves",
                requested: leaves,
                limit: node_budget,
            });
        }
        let dt = horizon / depth as f64;
        let sqrt_dt = dt.sqrt();
        let branch_count = 1usize << n_brownian;
        let increments = (0..branch_count)
            .map(|branch| {
                (0..n_brownian)
                    .map(|i| {
                        if (branch >> i) & 1 == 1 {
                            sqrt_dt
                        } else {
                            -sqrt_dt
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            depth,
            n_brownian,
            horizon,
            dt,
            increments,
        })
    }

    /// Build with the default node budget.
    pub fn build(depth: usize, n_brownian: usize, horizon: f64) -> Result<Self> {
        Self::with_budget(depth, n_brownian, horizon, DEFAULT_NODE_BUDGET)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_brownian(&self) -> usize {
        self.n_brownian
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of children of every node.
    pub fn branch_count(&self) -> usize {
        1 << self.n_brownian
    }

    /// Conditional probability of each branch.
    pub fn branch_prob(&self) -> f64 {
        1.0 / self.branch_count() as f64
    }

    /// Number of nodes at a time level.
    pub fn nodes_at_level(&self, level: usize) -> usize {
        debug_assert!(level <= self.depth);
        self.branch_count().pow(level as u32)
    }

    /// Unconditional probability of any single node at `level`.
    pub fn node_prob(&self, level: usize) -> f64 {
        1.0 / self.nodes_at_level(level) as f64
    }

    /// Total number of leaves.
    pub fn leaf_count(&self) -> usize {
        self.nodes_at_level(self.depth)
    }

    /// Index of the `branch`-th child of `node` (one level down).
    pub fn child(&self, node: usize, branch: usize) -> usize {
        node * self.branch_count() + branch
    }

    /// Index of the parent of a node (one level up).
    pub fn parent(&self, node: usize) -> usize {
        node / self.branch_count()
    }

    /// Which branch leads from the parent of `node` to `node`.
    pub fn branch_of(&self, node: usize) -> usize {
        node % self.branch_count()
    }

    /// Increment vector (length N) of a branch.
    pub fn increment(&self, branch: usize) -> &[f64] {
        &self.increments[branch]
    }

    /// Ancestor of a leaf-level node at an earlier level.
    pub fn ancestor_at(&self, node: usize, from_level: usize, to_level: usize) -> usize {
        debug_assert!(to_level <= from_level);
        node / self.branch_count().pow((from_level - to_level) as u32)
    }

    /// Conditional expectation over one branching: the probability-weighted
    /// average of per-child values.
    pub fn conditional_expectation(&self, child_values: &[f64]) -> Result<f64> {
        let bc = self.branch_count();
        if child_values.len() != bc {
            return Err(Error::ShapeMismatch {
                what: "conditional expectation child values",
                expected: bc,
                got: child_values.len(),
            });
        }
        Ok(child_values.iter().sum::<f64>() * self.branch_prob())
    }

    /// One-step martingale representation: decompose per-child values as
    /// `X_c = mean + sum_i chi_i * dw_i(c)` by orthogonal projection onto
    /// the span of the constant and the increment components.
    ///
    /// For N = 1 the 2x2 system is square and the representation is exact for
    /// any input. For N >= 2 the system is overdetermined (2^N children,
    /// N + 1 coefficients) and the returned `residual` is the max-norm defect
    /// of the reconstruction; it vanishes exactly when the child values are
    /// affine in the increments.
    pub fn martingale_representation(&self, child_values: &[f64]) -> Result<Representation> {
        let bc = self.branch_count();
        if child_values.len() != bc {
            return Err(Error::ShapeMismatch {
                what: "martingale representation child values",
                expected: bc,
                got: child_values.len(),
            });
        }
        let prob = self.branch_prob();
        let mean = child_values.iter().sum::<f64>() * prob;
        // The design columns {1, dw_1, .., dw_N} are mutually orthogonal under
        // the branch weights, so least squares reduces to N scalar projections
        // chi_i = E[X dw_i] / dt.
        let mut chi = vec![0.0; self.n_brownian];
        for (i, c) in chi.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (branch, &x) in child_values.iter().enumerate() {
                acc += x * self.increments[branch][i];
            }
            *c = acc * prob / self.dt;
        }
        let mut residual = 0.0f64;
        for (branch, &x) in child_values.iter().enumerate() {
            let mut recon = mean;
            for (i, &c) in chi.iter().enumerate() {
                recon += c * self.increments[branch][i];
            }
            residual = residual.max((x - recon).abs());
        }
        Ok(Representation {
            mean,
            chi,
            residual,
        })
    }

    /// As [`martingale_representation`](Self::martingale_representation), but
    /// fails when the reconstruction residual exceeds `tolerance` (relative to
    /// the magnitude of the inputs), signalling a non-representable input.
    pub fn martingale_representation_checked(
        &self,
        child_values: &[f64],
        tolerance: f64,
    ) -> Result<Representation> {
        let rep = self.martingale_representation(child_values)?;
        let scale = child_values.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
        if rep.residual > tolerance * scale {
            return Err(Error::Representation {
                residual: rep.residual,
                tolerance: tolerance * scale,
            });
        }
        Ok(rep)
    }

    /// Draw a root-to-leaf path, uniform over leaves, deterministic per seed.
    /// Returns the node index at every level, root included (length depth+1).
    pub fn sample_path(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bc = self.branch_count();
        let mut path = Vec::with_capacity(self.depth + 1);
        let mut node = 0usize;
        path.push(node);
        for _ in 0..self.depth {
            let branch = rng.gen_range(0..bc);
            node = self.child(node, branch);
            path.push(node);
        }
        path
    }
}

/// Result of a one-step martingale representation.
#[derive(Debug, Clone)]
pub struct Representation {
    /// Conditional mean of the child values.
    pub mean: f64,
    /// Integrand coefficients, one per Brownian component.
    pub chi: Vec<f64>,
    /// Max-norm reconstruction defect.
    pub residual: f64,
}

/// Measurability class of an [`AdaptedField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurability {
    /// A non-random function of (x, t): stored once per level.
    Deterministic,
    /// Known at time 0; on a tree with trivial F_0 this is stored like a
    /// deterministic field.
    F0,
    /// Genuinely node-dependent: stored per node.
    Adapted,
}

impl Measurability {
    fn per_node(self) -> bool {
        matches!(self, Measurability::Adapted)
    }
}

/// A space-time random field `u[level][node][grid point]` whose node index
/// respects the filtration: the value at level t may depend only on the node
/// at level t. Deterministic and F_0-measurable fields store a single slice
/// per level.
#[derive(Debug, Clone)]
pub struct AdaptedField {
    /// levels[t] is a flat (nodes x grid) row-major block.
    levels: Vec<Vec<f64>>,
    grid_len: usize,
    meas: Measurability,
    branch_count: usize,
}

impl AdaptedField {
    /// Allocate a zero field over `n_levels` levels (level 0 upward).
    pub fn zeros(
        tree: &ScenarioTree,
        n_levels: usize,
        grid_len: usize,
        meas: Measurability,
    ) -> Self {
        let levels = (0..n_levels)
            .map(|t| {
                let nodes = if meas.per_node() {
                    tree.nodes_at_level(t)
                } else {
                    1
                };
                vec![0.0; nodes * grid_len]
            })
            .collect();
        Self {
            levels,
            grid_len,
            meas,
            branch_count: tree.branch_count(),
        }
    }

    /// Build from a function of (level, node, grid index). For deterministic
    /// and F_0 fields the function is sampled at node 0 only.
    pub fn from_fn<F>(
        tree: &ScenarioTree,
        n_levels: usize,
        grid_len: usize,
        meas: Measurability,
        mut f: F,
    ) -> Self
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut field = Self::zeros(tree, n_levels, grid_len, meas);
        for t in 0..n_levels {
            let nodes = field.nodes_stored(t);
            for node in 0..nodes {
                for j in 0..grid_len {
                    field.levels[t][node * grid_len + j] = f(t, node, j);
                }
            }
        }
        field
    }

    pub fn measurability(&self) -> Measurability {
        self.meas
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    /// Number of distinct node slices stored at a level.
    pub fn nodes_stored(&self, level: usize) -> usize {
        self.levels[level].len() / self.grid_len
    }

    /// Value slice at (level, node). Non-adapted fields ignore `node`.
    pub fn at(&self, level: usize, node: usize) -> &[f64] {
        let idx = if self.meas.per_node() { node } else { 0 };
        &self.levels[level][idx * self.grid_len..(idx + 1) * self.grid_len]
    }

    /// Mutable value slice at (level, node).
    pub fn at_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        let idx = if self.meas.per_node() { node } else { 0 };
        &mut self.levels[level][idx * self.grid_len..(idx + 1) * self.grid_len]
    }

    /// Probability-weighted expectation of the field at a level: a single
    /// grid slice.
    pub fn expectation_at(&self, level: usize) -> Vec<f64> {
        let stored = self.nodes_stored(level);
        let mut out = vec![0.0; self.grid_len];
        let w = 1.0 / stored as f64;
        for node in 0..stored {
            let slice = &self.levels[level][node * self.grid_len..(node + 1) * self.grid_len];
            for (o, &v) in out.iter_mut().zip(slice) {
                *o += w * v;
            }
        }
        out
    }

    /// Scale every value in place.
    pub fn scale(&mut self, factor: f64) {
        for level in &mut self.levels {
            for v in level.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Scale level `t` in place.
    pub fn scale_level(&mut self, level: usize, factor: f64) {
        for v in self.levels[level].iter_mut() {
            *v *= factor;
        }
    }

    /// Whether the field stores one slice per node at branching levels.
    pub fn is_per_node(&self) -> bool {
        self.meas.per_node()
    }

    pub fn branch_count(&self) -> usize {
        self.branch_count
    }

    /// Pointwise sum with a field of identical shape and storage mode.
    pub fn add_assign_field(&mut self, other: &AdaptedField) {
        assert_eq!(self.levels.len(), other.levels.len());
        for (mine, theirs) in self.levels.iter_mut().zip(&other.levels) {
            assert_eq!(mine.len(), theirs.len());
            for (m, &t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rademacher_step() {
        let tree = ScenarioTree::build(1, 1, 1.0).unwrap();
        assert_eq!(tree.leaf_count(), 2);
        assert_eq!(tree.increment(0), &[-1.0]);
        assert_eq!(tree.increment(1), &[1.0]);
        assert_eq!(tree.branch_prob(), 0.5);
    }

    #[test]
    fn three_step_binary() {
        let tree = ScenarioTree::build(3, 1, 0.75).unwrap();
        assert_eq!(tree.leaf_count(), 8);
        assert_eq!(tree.dt(), 0.25);
        assert_eq!(tree.increment(1), &[0.5]);
        assert_eq!(tree.increment(0), &[-0.5]);
    }

    #[test]
    fn two_brownian_product_branching() {
        let tree = ScenarioTree::build(2, 2, 1.0).unwrap();
        assert_eq!(tree.leaf_count(), 16);
        assert_eq!(tree.branch_count(), 4);
        assert_eq!(tree.branch_prob(), 0.25);
    }

    #[test]
    fn budget_rejects_oversized_tree() {
        let err = ScenarioTree::with_budget(30, 1, 1.0, 1 << 20).unwrap_err();
        match err {
            Error::BudgetExceeded { limit, .. } => assert_eq!(limit, 1 << 20),
            other => panic!("expected budget error, got {other}"),
        }
    }

    #[test]
    fn increment_moments_are_design_exact() {
        for n in 1..=3 {
            let tree = ScenarioTree::build(2, n, 2.0).unwrap();
            let bc = tree.branch_count();
            let p = tree.branch_prob();
            for i in 0..n {
                let mean: f64 = (0..bc).map(|b| p * tree.increment(b)[i]).sum();
                let var: f64 = (0..bc).map(|b| p * tree.increment(b)[i].powi(2)).sum();
                assert!(mean.abs() < 1e-15);
                assert!((var - tree.dt()).abs() < 1e-14);
                for k in 0..i {
                    let cov: f64 = (0..bc)
                        .map(|b| p * tree.increment(b)[i] * tree.increment(b)[k])
                        .sum();
                    assert!(cov.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let tree = ScenarioTree::build(1, 1, 1.0).unwrap();
        assert_eq!(tree.conditional_expectation(&[3.0, 1.0]).unwrap(), 2.0);
        assert_eq!(tree.conditional_expectation(&[7.5, 7.5]).unwrap(), 7.5);
        let tree2 = ScenarioTree::build(1, 2, 1.0).unwrap();
        assert_eq!(
            tree2
                .conditional_expectation(&[1.0, 2.0, 3.0, 4.0])
                .unwrap(),
            2.5
        );
        assert!(tree.conditional_expectation(&[1.0]).is_err());
    }

    #[test]
    fn representation_binary_examples() {
        let tree = ScenarioTree::build(1, 1, 0.25).unwrap();
        // values (3, 1): branch 1 is +sqrt(dt) = +0.5
        let rep = tree.martingale_representation(&[1.0, 3.0]).unwrap();
        assert!((rep.mean - 2.0).abs() < 1e-15);
        assert!((rep.chi[0] - 2.0).abs() < 1e-15);
        assert!(rep.residual < 1e-15);

        let tree1 = ScenarioTree::build(1, 1, 1.0).unwrap();
        let rep = tree1.martingale_representation(&[-1.0, 5.0]).unwrap();
        assert!((rep.mean - 2.0).abs() < 1e-15);
        assert!((rep.chi[0] - 3.0).abs() < 1e-15);

        let rep = tree1.martingale_representation(&[4.0, 4.0]).unwrap();
        assert_eq!(rep.mean, 4.0);
        assert_eq!(rep.chi[0], 0.0);
    }

    #[test]
    fn representation_checked_flags_walsh_component() {
        // For N = 2 the product s1*s2 direction is orthogonal to the span,
        // so a pure product assignment must be rejected.
        let tree = ScenarioTree::build(1, 2, 1.0).unwrap();
        let values = [1.0, -1.0, -1.0, 1.0];
        let err = tree
            .martingale_representation_checked(&values, 1e-10)
            .unwrap_err();
        assert!(matches!(err, Error::Representation { .. }));
        // Affine assignments are represented exactly for any N.
        let affine: Vec<f64> = (0..4)
            .map(|b| 0.7 + 1.3 * tree.increment(b)[0] - 0.4 * tree.increment(b)[1])
            .collect();
        let rep = tree
            .martingale_representation_checked(&affine, 1e-12)
            .unwrap();
        assert!((rep.chi[0] - 1.3).abs() < 1e-13);
        assert!((rep.chi[1] + 0.4).abs() < 1e-13);
    }

    #[test]
    fn sample_path_deterministic_and_uniform() {
        let tree = ScenarioTree::build(4, 1, 1.0).unwrap();
        assert_eq!(tree.sample_path(42), tree.sample_path(42));
        assert_eq!(tree.sample_path(7).len(), 5);

        let tree1 = ScenarioTree::build(1, 1, 1.0).unwrap();
        let n = 100_000usize;
        let ups = (0..n)
            .filter(|&s| tree1.sample_path(s as u64)[1] == 1)
            .count();
        let freq = ups as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "up frequency {freq}");
    }

    #[test]
    fn tower_property_matches_leaf_average() {
        let tree = ScenarioTree::build(3, 1, 1.0).unwrap();
        let leaves = tree.leaf_count();
        let values: Vec<f64> = (0..leaves).map(|k| (k as f64).sin() + 0.3).collect();
        // iterated one-step conditional expectations
        let mut level_vals = values.clone();
        for t in (0..tree.depth()).rev() {
            let mut next = vec![0.0; tree.nodes_at_level(t)];
            for (node, slot) in next.iter_mut().enumerate() {
                let children: Vec<f64> = (0..tree.branch_count())
                    .map(|b| level_vals[tree.child(node, b)])
                    .collect();
                *slot = tree.conditional_expectation(&children).unwrap();
            }
            level_vals = next;
        }
        let direct: f64 = values.iter().sum::<f64>() / leaves as f64;
        assert!((level_vals[0] - direct).abs() <= 1e-12);
    }

    #[test]
    fn adapted_field_storage_modes() {
        let tree = ScenarioTree::build(3, 1, 1.0).unwrap();
        let det = AdaptedField::from_fn(&tree, 4, 3, Measurability::Deterministic, |t, _, j| {
            (t * 3 + j) as f64
        });
        assert_eq!(det.nodes_stored(3), 1);
        assert_eq!(det.at(3, 5), det.at(3, 0));

        let adapted = AdaptedField::from_fn(&tree, 4, 3, Measurability::Adapted, |t, n, j| {
            (t * 100 + n * 10 + j) as f64
        });
        assert_eq!(adapted.nodes_stored(3), 8);
        assert_ne!(adapted.at(3, 1), adapted.at(3, 0));
    }
}
