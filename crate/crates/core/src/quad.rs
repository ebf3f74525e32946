//! Gauss-Legendre quadrature nodes and weights.
//!
//! Computed by the Golub-Welsch algorithm: the nodes are the eigenvalues of
//! the symmetric tridiagonal Jacobi matrix of the Legendre recurrence, and
//! the weights follow from the first eigenvector components.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Returns `n` Gauss-Legendre `(node, weight)` pairs on `[a, b]`, nodes
/// ascending. The weights sum to `b - a`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::invalid("quadrature rule needs at least one node"));
    }
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(Error::invalid(format!(
            "bad quadrature interval [{a}, {b}]"
        )));
    }
    if n == 1 {
        return Ok(vec![((a + b) / 2.0, b - a)]);
    }

    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let off = kf / (4.0 * kf * kf - 1.0).sqrt();
        jac[(k - 1, k)] = off;
        jac[(k, k - 1)] = off;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);

    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let w = 2.0 * eig.eigenvectors[(0, i)].powi(2);
            ((a + b) / 2.0 + (b - a) / 2.0 * x, (b - a) / 2.0 * w)
        })
        .collect();
    rule.sort_by(|l, r| l.0.total_cmp(&r.0));
    Ok(rule)
}
