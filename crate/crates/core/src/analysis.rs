//! Study metrics and theorem-level checks.
//!
//! Provides the averaged error/residual metrics of the parameter sweeps, the
//! covariance-spectrum lower bound on the best linear approximation error,
//! the unconstrained projection error it is compared against, and small
//! statistics helpers for conditioning reports.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::interp::{self, IterationRecord, NewtonOptions};
use crate::model::{EvalCounter, ModelSystem};
use crate::ode::Trajectory;

/// Eigenvalue decay of the weighted snapshot covariance and the derived
/// approximation-error lower bounds.
#[derive(Debug, Clone)]
pub struct LowerBoundReport {
    /// Nonincreasing, nonnegative; as many entries as quadrature samples
    /// carry mass (the remaining spectrum is identically zero).
    pub eigenvalues: Vec<f64>,
}

impl LowerBoundReport {
    /// `sqrt(sum_{k>n} theta_k^2)`; zero once `n` exhausts the spectrum.
    pub fn bound_for(&self, n: usize) -> f64 {
        self.eigenvalues
            .iter()
            .skip(n)
            .map(|t| t * t)
            .sum::<f64>()
            .sqrt()
    }
}

/// Spectrum of `C = sum_k w_k x_k x_k^T` computed on the `q x q` Gram matrix
/// of weighted samples (never forming the `p x p` covariance), whose nonzero
/// eigenvalues coincide with C's.
pub fn covariance_lower_bound(
    samples: &[DVector<f64>],
    weights: &[f64],
) -> Result<LowerBoundReport> {
    if samples.is_empty() {
        return Err(Error::invalid("lower bound needs at least one sample"));
    }
    if samples.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} samples but {} weights",
            samples.len(),
            weights.len()
        )));
    }
    if !weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
        return Err(Error::invalid(
            "quadrature weights must be positive and finite",
        ));
    }
    let p = samples[0].len();
    if samples.iter().any(|x| x.len() != p) {
        return Err(Error::invalid("samples must share one length"));
    }

    let q = samples.len();
    let mut gram = DMatrix::zeros(q, q);
    for k in 0..q {
        for l in 0..=k {
            let v = (weights[k] * weights[l]).sqrt() * samples[k].dot(&samples[l]);
            gram[(k, l)] = v;
            gram[(l, k)] = v;
        }
    }
    let eig = gram.symmetric_eigen();
    let mut theta: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    theta.sort_by(|a, b| b.total_cmp(a));
    let top = theta.first().copied().unwrap_or(0.0).max(0.0);
    if theta.iter().any(|t| *t < -1e-12 * (1.0 + top)) {
        return Err(Error::NumericalFailure(format!(
            "covariance spectrum has a significantly negative eigenvalue: {:?}",
            theta.last()
        )));
    }
    // Clip tiny negative round-off and drop trailing entries beyond p.
    let mut eigenvalues: Vec<f64> = theta.into_iter().map(|t| t.max(0.0)).collect();
    eigenvalues.truncate(p.min(q));
    Ok(LowerBoundReport { eigenvalues })
}

/// Weighted sum of unconstrained projection residuals
/// `sum_k w_k min_a ||X a - x_k||^2` (weights carry the quadrature
/// normalization, matching the covariance construction above).
pub fn best_linear_error(
    x_basis: &DMatrix<f64>,
    samples: &[DVector<f64>],
    weights: &[f64],
) -> Result<f64> {
    if samples.len() != weights.len() {
        return Err(Error::invalid("sample/weight length mismatch"));
    }
    if samples.iter().any(|x| x.len() != x_basis.nrows()) {
        return Err(Error::invalid("sample length differs from basis rows"));
    }
    let n = x_basis.ncols();
    let svd = x_basis.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * smax)
        .count();
    if rank < n {
        return Err(Error::invalid(format!(
            "basis matrix is rank deficient ({rank} < {n})"
        )));
    }
    let u = svd.u.as_ref().expect("svd requested u");
    let mut total = 0.0;
    for (x, w) in samples.iter().zip(weights) {
        let coeffs = u.transpose() * x;
        let r2 = (x.norm_squared() - coeffs.norm_squared()).max(0.0);
        total += w * r2;
    }
    Ok(total)
}

/// Per-query-point diagnostics from a sweep.
#[derive(Debug, Clone)]
pub struct PerPoint {
    pub s: Vec<f64>,
    /// `sum_i ||x~(t_i) - x(t_i)||` (unscaled; the sweep metric applies
    /// `ds*dt`).
    pub error: f64,
    /// `sum_i ||F(t_i) a - f(x~(t_i), t_i, s)||` (unscaled).
    pub resid: f64,
    pub rho_star: f64,
    /// Max over iterations of the full condition number of `R_k`.
    pub max_cond: f64,
    /// Max over iterations of the retained-block condition number.
    pub max_cond_used: f64,
    pub iters: usize,
    pub converged: bool,
    /// False when the solver returned an error for this point.
    pub ok: bool,
    pub f_evals: u64,
    pub records: Vec<IterationRecord>,
    /// Returned coefficients (`None` when the solve failed); lets a sweep
    /// reuse this point's solution as the next basis' warm start.
    pub a: Option<DVector<f64>>,
}

/// Averaged sweep metrics.
#[derive(Debug, Clone)]
pub struct StudyMetrics {
    /// `ds*dt * sum_k sum_i ||x~ - x||`.
    pub e: f64,
    /// `ds*dt * sum_k sum_i ||dx~/dt - f(x~)||`.
    pub r: f64,
    pub ds: f64,
    pub dt: f64,
    pub per_point: Vec<PerPoint>,
    /// Points whose solve returned an error (excluded from the sums).
    pub failures: usize,
}

impl StudyMetrics {
    pub fn avg_iters(&self) -> f64 {
        if self.per_point.is_empty() {
            return 0.0;
        }
        self.per_point.iter().map(|p| p.iters as f64).sum::<f64>() / self.per_point.len() as f64
    }
}

/// Runs the interpolator at every evaluation point (in parallel) and
/// aggregates the averaged error and residual metrics against the supplied
/// truth trajectories.
#[allow(clippy::too_many_arguments)]
pub fn study_metrics(
    basis: &BasisSet,
    model: &dyn ModelSystem,
    eval_points: &[Vec<f64>],
    truth: &[Trajectory],
    ds: f64,
    dt: f64,
    opts: &NewtonOptions,
    counter: &EvalCounter,
) -> Result<StudyMetrics> {
    study_metrics_warm(basis, model, eval_points, truth, ds, dt, opts, counter, &[])
}

/// [`study_metrics`] with per-point warm starts (empty slice for none).
///
/// `warm[k]`, when present, seeds the solve at `eval_points[k]`; an
/// enrichment sweep passes the previous basis' coefficients padded with
/// zeros so each point's residual can only improve as columns are added.
#[allow(clippy::too_many_arguments)]
pub fn study_metrics_warm(
    basis: &BasisSet,
    model: &dyn ModelSystem,
    eval_points: &[Vec<f64>],
    truth: &[Trajectory],
    ds: f64,
    dt: f64,
    opts: &NewtonOptions,
    counter: &EvalCounter,
    warm: &[Option<DVector<f64>>],
) -> Result<StudyMetrics> {
    if !warm.is_empty() && warm.len() != eval_points.len() {
        return Err(Error::invalid(format!(
            "{} warm starts for {} eval points",
            warm.len(),
            eval_points.len()
        )));
    }
    if eval_points.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} eval points but {} truth trajectories",
            eval_points.len(),
            truth.len()
        )));
    }
    if !(ds > 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("ds and dt must be positive"));
    }
    for (k, tr) in truth.iter().enumerate() {
        if tr.grid() != basis.grid() {
            return Err(Error::invalid(format!(
                "truth trajectory {k} is on a different grid"
            )));
        }
    }

    let m = basis.grid().len();
    let per_point: Vec<PerPoint> = eval_points
        .par_iter()
        .zip(truth.par_iter())
        .enumerate()
        .map(|(k, (s, tr))| {
            let seed = warm.get(k).and_then(Option::as_ref);
            let local = EvalCounter::new();
            match interp::newton_solve_from(basis, s, model, &local, opts, seed) {
                Ok(res) => {
                    let mut error = 0.0;
                    let mut resid = 0.0;
                    let fa = basis.raw_f() * &res.a;
                    let p = basis.state_dim();
                    for i in 0..m {
                        let mut e2 = 0.0;
                        let mut r2 = 0.0;
                        for c in 0..p {
                            let de = res.final_state[(i, c)] - tr.states()[(i, c)];
                            let dr = fa[i * p + c] - res.final_forcing[(i, c)];
                            e2 += de * de;
                            r2 += dr * dr;
                        }
                        error += e2.sqrt();
                        resid += r2.sqrt();
                    }
                    let max_cond = res
                        .per_iter
                        .iter()
                        .map(|r| r.cond_full)
                        .fold(1.0f64, f64::max);
                    let max_cond_used = res
                        .per_iter
                        .iter()
                        .map(|r| r.cond_used)
                        .fold(1.0f64, f64::max);
                    PerPoint {
                        s: s.clone(),
                        error,
                        resid,
                        rho_star: res.rho_star,
                        max_cond,
                        max_cond_used,
                        iters: res.iters,
                        converged: res.converged,
                        ok: true,
                        f_evals: res.f_evals,
                        records: res.per_iter,
                        a: Some(res.a),
                    }
                }
                Err(_) => PerPoint {
                    s: s.clone(),
                    error: 0.0,
                    resid: 0.0,
                    rho_star: f64::NAN,
                    max_cond: f64::NAN,
                    max_cond_used: f64::NAN,
                    iters: 0,
                    converged: false,
                    ok: false,
                    f_evals: local.count(),
                    records: Vec::new(),
                    a: None,
                },
            }
        })
        .collect();

    counter.add(per_point.iter().map(|p| p.f_evals).sum());
    let failures = per_point.iter().filter(|p| !p.ok).count();
    let e = ds
        * dt
        * per_point
            .iter()
            .filter(|p| p.ok)
            .map(|p| p.error)
            .sum::<f64>();
    let r = ds
        * dt
        * per_point
            .iter()
            .filter(|p| p.ok)
            .map(|p| p.resid)
            .sum::<f64>();
    Ok(StudyMetrics {
        e,
        r,
        ds,
        dt,
        per_point,
        failures,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "rank correlation needs two equal-length series",
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "rank correlation undefined for a constant series",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// One row of the enrichment-sweep summary.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub n: usize,
    pub e: f64,
    pub r: f64,
    pub bound: f64,
    pub avg_iters: f64,
    /// Unconstrained projection error of the same basis (reported alongside,
    /// not part of the CSV schema).
    pub best_linear: f64,
}

/// Writes the sweep summary with columns `n_bases,E,R,bound,avg_newton_iters`.
pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut buf = String::from("n_bases,E,R,bound,avg_newton_iters\n");
    for row in rows {
        buf.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            row.n, row.e, row.r, row.bound, row.avg_iters
        ));
    }
    write_file(path, &buf)
}

/// Writes per-point diagnostics with columns `s,rho_star,max_cond,iters,error`.
/// Multi-component parameters are joined with `;` in the `s` column.
pub fn write_per_point_csv(path: &Path, metrics: &StudyMetrics) -> Result<()> {
    let mut buf = String::from("s,rho_star,max_cond,iters,error\n");
    for p in &metrics.per_point {
        let s =
            p.s.iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(";");
        buf.push_str(&format!(
            "{s},{:.16e},{:.16e},{},{:.16e}\n",
            p.rho_star, p.max_cond, p.iters, p.error
        ));
    }
    write_file(path, &buf)
}

/// Per-`n` per-point files for selected basis sizes, named
/// `perpoint_n{n}.csv`.
pub fn write_selected_per_point(dir: &Path, by_n: &BTreeMap<usize, StudyMetrics>) -> Result<()> {
    for (n, metrics) in by_n {
        write_per_point_csv(&dir.join(format!("perpoint_n{n}.csv")), metrics)?;
    }
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
