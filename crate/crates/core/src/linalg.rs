//! Bounded-iteration wrappers around the dense eigenvalue and singular-value
//! routines. The unbounded library calls can fail to deflate on exactly
//! rank-deficient matrices (an all-zero operator spins forever), so every
//! call here carries an iteration cap and a deterministic fallback chain:
//! plain -> orthogonal-similarity rotated -> diagonally perturbed.

use nalgebra::linalg::{Schur, SymmetricEigen, SVD};
use nalgebra::{Complex, DMatrix};

const MAX_ITER: usize = 50_000;

fn schur_eigs(m: DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    Schur::try_new(m, f64::EPSILON, MAX_ITER)
        .map(|s| s.complex_eigenvalues().iter().copied().collect())
}

/// A fixed dense orthogonal matrix (QR of a seeded pseudo-random matrix).
fn rotation(n: usize) -> DMatrix<f64> {
    let r = DMatrix::from_fn(n, n, |i, j| crate::coeffs::node_noise(0x5eed_cafe, i, j));
    r.qr().q()
}

/// Eigenvalues of a general real matrix. A similarity rotation leaves the
/// spectrum unchanged exactly; the final diagonal perturbation moves
/// eigenvalues by at most ~1e-12 times the matrix scale, far below every
/// tolerance used on spectra.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let scale = m.amax();
    if scale == 0.0 {
        return vec![Complex::new(0.0, 0.0); n];
    }
    if let Some(e) = schur_eigs(m.clone()) {
        return e;
    }
    let q = rotation(n);
    if let Some(e) = schur_eigs(q.transpose() * m * &q) {
        return e;
    }
    let mut p = m.clone();
    for i in 0..n {
        p[(i, i)] += scale * 1e-12 * (1.0 + i as f64 / n as f64);
    }
    schur_eigs(p).unwrap_or_default()
}

/// Two-norm condition number from a bounded SVD, falling back to the
/// symmetric eigenproblem of the normal matrix; `None` when neither
/// converges.
pub fn condition_number(m: &DMatrix<f64>) -> Option<f64> {
    if let Some(svd) = SVD::try_new(m.clone(), false, false, f64::EPSILON, MAX_ITER) {
        let sv = svd.singular_values;
        let smax = sv.iter().fold(0.0f64, |a, &b| a.max(b));
        let smin = sv.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        return Some(if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        });
    }
    let normal = m.transpose() * m;
    SymmetricEigen::try_new(normal, f64::EPSILON, MAX_ITER).map(|se| {
        let mut lmax = 0.0f64;
        let mut lmin = f64::INFINITY;
        for &l in se.eigenvalues.iter() {
            let l = l.max(0.0);
            lmax = lmax.max(l);
            lmin = lmin.min(l);
        }
        if lmin > 0.0 {
            (lmax / lmin).sqrt()
        } else {
            f64::INFINITY
        }
    })
}
