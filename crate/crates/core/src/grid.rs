//! One-dimensional Dirichlet grid and tridiagonal operators.

use crate::error::{Error, Result};

/// Uniform grid on a bounded interval with homogeneous Dirichlet ends.
/// Only the `j_interior` interior points carry unknowns; the boundary values
/// are identically zero and are eliminated from every operator row.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    x_min: f64,
    x_max: f64,
    j_interior: usize,
    h: f64,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, j_interior: usize) -> Result<Self> {
        if !(x_max > x_min) {
            return Err(Error::Domain("grid requires x_max > x_min".into()));
        }
        if j_interior < 3 {
            return Err(Error::Domain(
                "grid requires at least 3 interior points".into(),
            ));
        }
        let h = (x_max - x_min) / (j_interior as f64 + 1.0);
        Ok(Self {
            x_min,
            x_max,
            j_interior,
            h,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Number of interior points.
    pub fn len(&self) -> usize {
        self.j_interior
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Coordinate of interior point `j` (0-based: j = 0 is the first interior point).
    pub fn x(&self, j: usize) -> f64 {
        self.x_min + (j as f64 + 1.0) * self.h
    }

    /// All interior coordinates.
    pub fn coords(&self) -> Vec<f64> {
        (0..self.j_interior).map(|j| self.x(j)).collect()
    }

    /// h-weighted Euclidean inner product on interior values.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.h * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    /// h-weighted L2 norm.
    pub fn norm_h(&self, v: &[f64]) -> f64 {
        self.inner(v, v).sqrt()
    }

    /// Forward-difference H1 seminorm including the Dirichlet end gaps.
    pub fn h1_seminorm(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &x in v {
            let d = (x - prev) / self.h;
            acc += d * d;
            prev = x;
        }
        let d = (0.0 - prev) / self.h;
        acc += d * d;
        (self.h * acc).sqrt()
    }

    /// Midpoint-rule mass (integral) of interior values.
    pub fn mass(&self, v: &[f64]) -> f64 {
        self.h * v.iter().sum::<f64>()
    }
}

/// Tridiagonal operator acting on interior grid values, with the (t, node)
/// slice it was assembled from.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    /// sub[j] multiplies v_{j} in row j+1 (length n-1).
    pub sub: Vec<f64>,
    /// diag[j] multiplies v_j in row j (length n).
    pub diag: Vec<f64>,
    /// sup[j] multiplies v_{j+1} in row j (length n-1).
    pub sup: Vec<f64>,
    /// Time level the operator discretizes.
    pub level: usize,
    /// Tree node the operator discretizes.
    pub node: usize,
}

impl Tridiagonal {
    pub fn zeros(n: usize, level: usize, node: usize) -> Self {
        Self {
            sub: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            sup: vec![0.0; n.saturating_sub(1)],
            level,
            node,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        debug_assert_eq!(v.len(), n);
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut acc = self.diag[j] * v[j];
            if j > 0 {
                acc += self.sub[j - 1] * v[j - 1];
            }
            if j + 1 < n {
                acc += self.sup[j] * v[j + 1];
            }
            out[j] = acc;
        }
        out
    }

    /// Exact matrix transpose (sub and sup swap).
    pub fn transpose(&self) -> Self {
        Self {
            sub: self.sup.clone(),
            diag: self.diag.clone(),
            sup: self.sub.clone(),
            level: self.level,
            node: self.node,
        }
    }

    /// Whether every row of `I - dt * self` is strictly diagonally dominant.
    pub fn implicit_diag_dominant(&self, dt: f64) -> bool {
        let n = self.len();
        (0..n).all(|j| {
            let d = (1.0 - dt * self.diag[j]).abs();
            let mut off = 0.0;
            if j > 0 {
                off += (dt * self.sub[j - 1]).abs();
            }
            if j + 1 < n {
                off += (dt * self.sup[j]).abs();
            }
            d > off
        })
    }

    /// Solve `(I - dt * self) u = rhs` by the Thomas algorithm.
    pub fn solve_implicit(&self, dt: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if rhs.len() != n {
            return Err(Error::ShapeMismatch {
                what: "implicit solve rhs",
                expected: n,
                got: rhs.len(),
            });
        }
        let sub: Vec<f64> = self.sub.iter().map(|&a| -dt * a).collect();
        let diag: Vec<f64> = self.diag.iter().map(|&a| 1.0 - dt * a).collect();
        let sup: Vec<f64> = self.sup.iter().map(|&a| -dt * a).collect();
        solve_tridiagonal(&sub, &diag, &sup, rhs)
    }
}

/// Thomas elimination for a general tridiagonal system.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Err(Error::Domain("empty tridiagonal system".into()));
    }
    if rhs.len() != n || (n > 1 && (sub.len() + 1 != n || sup.len() + 1 != n)) {
        return Err(Error::ShapeMismatch {
            what: "tridiagonal system",
            expected: n,
            got: rhs.len(),
        });
    }
    let mut c_prime = vec![0.0; n.saturating_sub(1)];
    let mut d_prime = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err(Error::Inconsistency(
            "tridiagonal elimination hit a zero pivot at row 0".into(),
        ));
    }
    if n > 1 {
        c_prime[0] = sup[0] / diag[0];
    }
    d_prime[0] = rhs[0] / diag[0];
    for j in 1..n {
        let denom = diag[j] - sub[j - 1] * c_prime[j - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Inconsistency(format!(
                "tridiagonal elimination hit a degenerate pivot at row {j}"
            )));
        }
        if j + 1 < n {
            c_prime[j] = sup[j] / denom;
        }
        d_prime[j] = (rhs[j] - sub[j - 1] * d_prime[j - 1]) / denom;
    }
    let mut x = d_prime;
    for j in (0..n - 1).rev() {
        x[j] -= c_prime[j] * x[j + 1];
    }
    Ok(x)
}
