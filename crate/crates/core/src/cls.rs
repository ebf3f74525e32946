//! Equality-constrained least squares: `min ||R a||` subject to `e^T a = 1`.
//!
//! Every solve runs through one SVD of `R`. Rotating the problem by the right
//! singular vectors `V` turns the KKT system into a diagonal one in which the
//! constrained minimum over the trailing `j` singular directions is
//!
//! ```text
//! lambda_j = 1 / (y_j^T y_j),   y_j = Sigma_j^{-1} d_j,   d = V^T e
//! ```
//!
//! a nonincreasing ladder in `j`. The truncated solver keeps the smallest
//! trailing block whose ladder value is within `tau` of the full minimum
//! `lambda_n`, trading a quantified residual increase for conditioning. The
//! full solve is the `tau = 0` specialization. Rank-deficient `R` takes a
//! dedicated path that combines null-space right singular vectors, or falls
//! back to a null-space/pseudoinverse method when the constraint is invisible
//! to the null space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default numerical-rank threshold, relative to the largest singular value.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Default relative truncation scale: `tau = 1e-10 * (1 + lambda_n)`.
pub const DEFAULT_TAU_SCALE: f64 = 1e-10;

/// How the residual-sacrifice tolerance `tau` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationRule {
    /// Compare `|lambda_k - lambda_n| < tau` directly.
    Absolute(f64),
    /// Compare against `scale * (1 + lambda_n)`.
    Relative(f64),
}

impl Default for TruncationRule {
    fn default() -> Self {
        TruncationRule::Relative(DEFAULT_TAU_SCALE)
    }
}

/// Solution of one constrained least-squares problem.
#[derive(Debug, Clone)]
pub struct ClsSolution {
    /// Minimizer with `e^T a = 1`.
    pub a: DVector<f64>,
    /// Lagrange multiplier of the solved (possibly truncated) problem;
    /// equals `||R a||^2`.
    pub lagrange: f64,
    /// Number of trailing singular directions retained.
    pub trunc_rank: usize,
    /// Ladder value of the untruncated problem.
    pub lambda_full: f64,
    /// Condition number of the retained trailing block.
    pub cond_used: f64,
    /// Smallest singular value of `R`.
    pub sigma_min: f64,
    /// Largest singular value of `R`.
    pub sigma_max: f64,
}

impl ClsSolution {
    /// Condition number of the full matrix.
    pub fn cond_full(&self) -> f64 {
        if self.sigma_min > 0.0 {
            self.sigma_max / self.sigma_min
        } else {
            f64::INFINITY
        }
    }
}

struct Rotated {
    /// Singular values, descending.
    sigma: Vec<f64>,
    /// Right singular vectors as columns, ordered like `sigma`.
    v: DMatrix<f64>,
    /// `d = V^T e`.
    d: Vec<f64>,
}

fn validate(r: &DMatrix<f64>) -> Result<()> {
    if r.ncols() == 0 || r.nrows() == 0 {
        return Err(Error::invalid("constrained LS needs a nonempty matrix"));
    }
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("constrained LS matrix must be finite"));
    }
    Ok(())
}

/// Full SVD rotation of `R`, padding with zero rows when `q < n` so the right
/// singular basis is complete.
fn rotate(r: &DMatrix<f64>) -> Rotated {
    let n = r.ncols();
    let padded;
    let work = if r.nrows() < n {
        padded = {
            let mut m = DMatrix::zeros(n, n);
            m.rows_mut(0, r.nrows()).copy_from(r);
            m
        };
        &padded
    } else {
        r
    };
    let svd = work.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut sigma = Vec::with_capacity(n);
    let mut v = DMatrix::zeros(n, n);
    let mut d = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        sigma.push(svd.singular_values[src]);
        let mut sum = 0.0;
        for row in 0..n {
            let val = v_t[(src, row)];
            v[(row, col)] = val;
            sum += val;
        }
        d.push(sum);
    }
    Rotated { sigma, v, d }
}

fn n1_solution(r: &DMatrix<f64>) -> ClsSolution {
    let norm = r.column(0).norm();
    ClsSolution {
        a: DVector::from_element(1, 1.0),
        lagrange: norm * norm,
        trunc_rank: 1,
        lambda_full: norm * norm,
        cond_used: 1.0,
        sigma_min: norm,
        sigma_max: norm,
    }
}

/// Solves the full (untruncated) problem; `[R; e^T]` must have full column
/// rank, otherwise the call is routed to [`solve_rank_deficient`].
pub fn solve_full(r: &DMatrix<f64>) -> Result<ClsSolution> {
    solve_with_rule(r, TruncationRule::Absolute(0.0))
}

/// Solves with an absolute residual-sacrifice tolerance `tau >= 0`.
pub fn solve_truncated(r: &DMatrix<f64>, tau: f64) -> Result<ClsSolution> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!(
            "truncation tolerance must be >= 0, got {tau}"
        )));
    }
    solve_with_rule(r, TruncationRule::Absolute(tau))
}

/// Solves with either an absolute or a relative truncation rule.
pub fn solve_with_rule(r: &DMatrix<f64>, rule: TruncationRule) -> Result<ClsSolution> {
    validate(r)?;
    match rule {
        TruncationRule::Absolute(t) if !(t >= 0.0) => {
            return Err(Error::invalid("truncation tolerance must be >= 0"));
        }
        TruncationRule::Relative(c) if !(c >= 0.0) => {
            return Err(Error::invalid("truncation scale must be >= 0"));
        }
        _ => {}
    }
    let n = r.ncols();
    if n == 1 {
        return Ok(n1_solution(r));
    }

    let rot = rotate(r);
    let sigma_max = rot.sigma[0];
    let rank = rot
        .sigma
        .iter()
        .filter(|&&s| s > DEFAULT_RANK_TOL * sigma_max)
        .count();
    if sigma_max == 0.0 || rank < n {
        return solve_rank_deficient(r, DEFAULT_RANK_TOL);
    }

    // Ladder over trailing blocks: lambda_j = 1 / sum_{i > n-j} (d_i/sigma_i)^2.
    let mut ladder = vec![0.0f64; n + 1]; // ladder[j] = lambda_j, 1-based
    let mut yty = 0.0;
    for j in 1..=n {
        let i = n - j;
        let t = rot.d[i] / rot.sigma[i];
        yty += t * t;
        ladder[j] = 1.0 / yty;
    }
    let lambda_full = ladder[n];

    let tau = match rule {
        TruncationRule::Absolute(t) => t,
        TruncationRule::Relative(c) => c * (1.0 + lambda_full),
    };
    let k = (1..=n)
        .find(|&j| (ladder[j] - lambda_full).abs() < tau)
        .unwrap_or(n);
    let lambda_k = ladder[k];

    // k-truncated KKT solution in rotated coordinates: a2_hat = lambda_k *
    // Sigma2^{-2} d2 over the trailing k directions, zero elsewhere.
    let mut a = DVector::zeros(n);
    for i in (n - k)..n {
        let coef = lambda_k * rot.d[i] / (rot.sigma[i] * rot.sigma[i]);
        a.axpy(coef, &rot.v.column(i).into_owned(), 1.0);
    }

    Ok(ClsSolution {
        a,
        lagrange: lambda_k,
        trunc_rank: k,
        lambda_full,
        cond_used: rot.sigma[n - k] / rot.sigma[n - 1],
        sigma_min: rot.sigma[n - 1],
        sigma_max,
    })
}

/// Handles numerically rank-deficient `R` (`sigma_i <= rank_tol * sigma_1`
/// below full column rank).
pub fn solve_rank_deficient(r: &DMatrix<f64>, rank_tol: f64) -> Result<ClsSolution> {
    validate(r)?;
    if !(rank_tol >= 0.0) {
        return Err(Error::invalid("rank tolerance must be >= 0"));
    }
    let n = r.ncols();
    if n == 1 {
        return Ok(n1_solution(r));
    }

    let rot = rotate(r);
    let sigma_max = rot.sigma[0];
    let rank = rot
        .sigma
        .iter()
        .filter(|&&s| s > rank_tol * sigma_max)
        .count();
    if rank == n {
        return Err(Error::invalid(
            "matrix is numerically full rank; use solve_full",
        ));
    }

    // Null-space right singular vectors, sign-fixed so their d-entries are
    // nonnegative (a free gauge choice that makes averaging deterministic).
    let nullity = n - rank;
    let mut d2 = Vec::with_capacity(nullity);
    let mut v2 = DMatrix::zeros(n, nullity);
    for (col, i) in (rank..n).enumerate() {
        let sign = if rot.d[i] < 0.0 { -1.0 } else { 1.0 };
        d2.push(sign * rot.d[i]);
        for row in 0..n {
            v2[(row, col)] = sign * rot.v[(row, i)];
        }
    }

    let selected: Vec<usize> = (0..nullity).filter(|&i| d2[i] > rank_tol).collect();
    if !selected.is_empty() {
        // Component-wise average of the constraint-visible null vectors,
        // rescaled onto e^T a = 1; the residual is zero up to rank noise.
        let mut avg = DVector::zeros(n);
        for &i in &selected {
            avg.axpy(1.0 / selected.len() as f64, &v2.column(i).into_owned(), 1.0);
        }
        let denom: f64 = selected.iter().map(|&i| d2[i]).sum::<f64>() / selected.len() as f64;
        let a = avg / denom;
        return Ok(ClsSolution {
            a,
            lagrange: 0.0,
            trunc_rank: selected.len(),
            lambda_full: 0.0,
            cond_used: 1.0,
            sigma_min: *rot.sigma.last().unwrap(),
            sigma_max,
        });
    }

    // The constraint cannot be satisfied inside the null space: parameterize
    // a = e/n + Z y with Z spanning null(e^T) and take the minimum-norm
    // least-squares y.
    let z = nullspace_of_ones(n);
    let a0 = DVector::from_element(n, 1.0 / n as f64);
    let rz = r * &z;
    let rhs = -(r * &a0);
    let svd = rz.svd(true, true);
    let y = svd
        .solve(&rhs, rank_tol.max(f64::EPSILON) * sigma_max.max(1.0))
        .map_err(|e| Error::NumericalFailure(format!("null-space solve failed: {e}")))?;
    let a = a0 + z * y;
    let res = (r * &a).norm_squared();
    Ok(ClsSolution {
        a,
        lagrange: res,
        lambda_full: res,
        trunc_rank: rank.max(1),
        cond_used: if rank >= 1 {
            rot.sigma[0] / rot.sigma[rank - 1]
        } else {
            1.0
        },
        sigma_min: *rot.sigma.last().unwrap(),
        sigma_max,
    })
}

/// Orthonormal basis of `null(e^T)` via the Householder reflector mapping
/// `e/sqrt(n)` to the first coordinate axis.
fn nullspace_of_ones(n: usize) -> DMatrix<f64> {
    let mut u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    u[0] -= 1.0;
    let nu = u.norm();
    let mut h = DMatrix::identity(n, n);
    if nu > 0.0 {
        u /= nu;
        h -= 2.0 * &u * u.transpose();
    }
    h.columns(1, n - 1).into_owned()
}
