//! Residual-minimizing interpolation.
//!
//! Given a basis of `n` snapshots, a query parameter `s`, and the affine
//! constraint `e^T a = 1`, the interpolant is `x~(t) = X(t) a` where `a`
//! minimizes the weighted defect
//!
//! ```text
//! rho(a) = ||F a - phi(a)||^2,   phi(a) block i = w_i * f(X_i a, t_i, s).
//! ```
//!
//! Each Newton step linearizes `h(a) = F a - phi(a)` around the current
//! iterate, forms `R_k = J_k + (h_k - J_k a_k) e^T`, and takes the next
//! iterate as the constrained least-squares minimizer of `||R_k a||`. The
//! Jacobian action is approximated by forward differences against the
//! already-evaluated base forcing, costing exactly `n*m` extra evaluations
//! per step.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSet;
use crate::cls::{self, ClsSolution, TruncationRule};
use crate::error::{Error, Result};
use crate::model::{eval_counted, EvalCounter, ModelSystem};

/// Default forward-difference increment before per-block scaling.
pub const DEFAULT_FD_EPS: f64 = 1e-6;
/// Default cap on Newton iterations.
pub const DEFAULT_MAX_ITERS: usize = 10;
/// Default step-size stopping threshold.
pub const DEFAULT_STEP_TOL: f64 = 1e-10;
/// Default residual stopping threshold per stacked entry; the absolute
/// threshold scales with the stack length `m*p`.
pub const DEFAULT_RESID_TOL_PER_ENTRY: f64 = 1e-12;
/// Constraint slack accepted by [`residual`].
pub const CONSTRAINT_TOL: f64 = 1e-10;

/// Step-acceptance strategy for the Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Damping {
    /// Always take the full step.
    #[default]
    Off,
    /// Halve the step until the residual stops increasing (at most 30
    /// halvings); three consecutive non-decreasing damped iterations abort
    /// the solve with the best iterate seen, flagged not converged.
    Halving,
}

/// Newton iteration controls.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Stop once `rho(a_k) <= resid_tol`.
    pub resid_tol: f64,
    /// Stop once the accepted step norm drops below this.
    pub step_tol: f64,
    /// Forward-difference increment, scaled per time block by
    /// `1 + ||X_i a||_inf`.
    pub fd_eps: f64,
    /// Truncation rule handed to the constrained least-squares kernel.
    pub trunc: TruncationRule,
    pub damping: Damping,
}

impl NewtonOptions {
    /// Defaults with the residual threshold scaled to a stack of `mp`
    /// entries.
    pub fn for_stack(mp: usize) -> Self {
        NewtonOptions {
            max_iters: DEFAULT_MAX_ITERS,
            resid_tol: DEFAULT_RESID_TOL_PER_ENTRY * mp as f64,
            step_tol: DEFAULT_STEP_TOL,
            fd_eps: DEFAULT_FD_EPS,
            trunc: TruncationRule::default(),
            damping: Damping::Off,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.resid_tol > 0.0) || !(self.step_tol > 0.0) || !(self.fd_eps > 0.0) {
            return Err(Error::invalid("newton tolerances must be positive"));
        }
        Ok(())
    }
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self::for_stack(1)
    }
}

/// Residual evaluation at one coefficient vector.
#[derive(Debug, Clone)]
pub struct ResidualEval {
    /// Weighted defect `F a - phi(a)`, length `m*p`.
    pub h: DVector<f64>,
    /// `rho = ||h||^2`.
    pub rho: f64,
    /// Interpolated states, `m x p` (unweighted).
    pub xtilde: DMatrix<f64>,
    /// Forcing at the interpolated states, `m x p` (unweighted).
    pub forcing: DMatrix<f64>,
}

/// Newton system at one iterate: `R_k` and the FD Jacobian `J_k`.
#[derive(Debug, Clone)]
pub struct NewtonMatrices {
    pub r: DMatrix<f64>,
    pub j: DMatrix<f64>,
}

/// One recorded Newton iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Residual after the accepted step.
    pub rho: f64,
    /// Residual the step linearized at.
    pub rho_before: f64,
    /// Norm of the accepted step `||a_{k+1} - a_k||`.
    pub step_norm: f64,
    /// Smallest singular value of `R_k`.
    pub sigma_min: f64,
    /// Full condition number of `R_k`.
    pub cond_full: f64,
    /// Condition number of the retained block after truncation.
    pub cond_used: f64,
    pub trunc_rank: usize,
    /// Residual-gap multiplier reported by the constrained solve.
    pub lagrange: f64,
    /// Spectral norm of the FD Jacobian `J_k`.
    pub j_norm: f64,
    /// Forcing evaluations spent on this iteration.
    pub f_evals: u64,
}

/// Outcome of [`newton_solve`].
#[derive(Debug, Clone)]
pub struct InterpolationResult {
    pub a: DVector<f64>,
    /// Residual at the returned coefficients.
    pub rho_star: f64,
    /// Residual at the starting point (least-squares guess or warm start,
    /// whichever seeded the iteration).
    pub rho_initial: f64,
    /// Newton steps accepted.
    pub iters: usize,
    /// One record per Newton system built. A solve that stops before taking
    /// any step still records its first system's conditioning, so this can
    /// hold one entry while `iters` is zero.
    pub per_iter: Vec<IterationRecord>,
    pub converged: bool,
    /// Total forcing evaluations spent, including the initial guess.
    pub f_evals: u64,
    /// Interpolated states at the returned coefficients, `m x p`.
    pub final_state: DMatrix<f64>,
    /// Forcing at the returned states, `m x p`.
    pub final_forcing: DMatrix<f64>,
}

fn check_query(basis: &BasisSet, s: &[f64], model: &dyn ModelSystem) -> Result<()> {
    if model.state_dim() != basis.state_dim() {
        return Err(Error::invalid(format!(
            "model state dimension {} != basis {}",
            model.state_dim(),
            basis.state_dim()
        )));
    }
    if s.len() != model.param_dim() {
        return Err(Error::invalid(format!(
            "query parameter length {} != model parameter dimension {}",
            s.len(),
            model.param_dim()
        )));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("query parameter must be finite"));
    }
    Ok(())
}

/// Evaluates the weighted defect `h(a)` and `rho(a)`; costs `m` forcing
/// evaluations. Rejects coefficients violating `e^T a = 1` beyond 1e-10.
pub fn residual(
    basis: &BasisSet,
    a: &DVector<f64>,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
) -> Result<ResidualEval> {
    check_query(basis, s, model)?;
    let n = basis.len();
    if a.len() != n {
        return Err(Error::invalid(format!(
            "coefficient length {} != basis size {n}",
            a.len()
        )));
    }
    let sum: f64 = a.iter().sum();
    if (sum - 1.0).abs() > CONSTRAINT_TOL {
        return Err(Error::invalid(format!(
            "coefficients violate the affine constraint: e^T a = {sum}"
        )));
    }

    let (m, p) = (basis.grid().len(), basis.state_dim());
    let weights = basis.weights();
    let stacked = basis.raw_x() * a;
    let mut h = basis.stacked_f() * a;
    let mut xtilde = DMatrix::zeros(m, p);
    let mut forcing = DMatrix::zeros(m, p);
    let mut buf = vec![0.0; p];
    for i in 0..m {
        let x = &stacked.as_slice()[i * p..(i + 1) * p];
        eval_counted(model, counter, x, basis.grid().points()[i], s, &mut buf);
        if !buf.iter().all(|v| v.is_finite()) {
            return Err(Error::EvaluationFailure {
                time_index: i,
                column: 0,
            });
        }
        for c in 0..p {
            xtilde[(i, c)] = x[c];
            forcing[(i, c)] = buf[c];
            h[i * p + c] -= weights[i] * buf[c];
        }
    }
    let rho = h.norm_squared();
    Ok(ResidualEval {
        h,
        rho,
        xtilde,
        forcing,
    })
}

/// Builds the Newton matrix `R_k` and the FD Jacobian `J_k` at `a`, reusing
/// the base evaluation; costs exactly `n*m` forcing evaluations.
///
/// Column `j` of `J_k` is the stacked forcing history minus the weighted
/// forward-difference action of the state Jacobian on basis column `j`:
/// `J[(i), j] = w_i * (F_i e_j - (f(x~_i + eps_i X_i e_j) - f(x~_i)) / eps_i)`
/// with `eps_i = fd_eps * (1 + ||x~_i||_inf)`.
pub fn build_newton_matrix(
    basis: &BasisSet,
    a: &DVector<f64>,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    fd_eps: f64,
    base: &ResidualEval,
) -> Result<NewtonMatrices> {
    check_query(basis, s, model)?;
    if !(fd_eps > 0.0) {
        return Err(Error::invalid("fd_eps must be positive"));
    }
    let n = basis.len();
    if a.len() != n {
        return Err(Error::invalid(format!(
            "coefficient length {} != basis size {n}",
            a.len()
        )));
    }
    let (m, p) = (basis.grid().len(), basis.state_dim());
    let weights = basis.weights();

    let eps: Vec<f64> = (0..m)
        .map(|i| fd_eps * (1.0 + base.xtilde.row(i).amax()))
        .collect();

    let mut j_mat = basis.stacked_f().clone();
    let mut probe = vec![0.0; p];
    let mut fval = vec![0.0; p];
    for j in 0..n {
        for i in 0..m {
            for c in 0..p {
                probe[c] = base.xtilde[(i, c)] + eps[i] * basis.raw_x()[(i * p + c, j)];
            }
            eval_counted(
                model,
                counter,
                &probe,
                basis.grid().points()[i],
                s,
                &mut fval,
            );
            if !fval.iter().all(|v| v.is_finite()) {
                return Err(Error::EvaluationFailure {
                    time_index: i,
                    column: j,
                });
            }
            let scale = weights[i] / eps[i];
            for c in 0..p {
                j_mat[(i * p + c, j)] -= scale * (fval[c] - base.forcing[(i, c)]);
            }
        }
    }

    // R_k = J_k + (h - J_k a) e^T: the correction vector is added to every
    // column.
    let u = &base.h - &j_mat * a;
    let mut r = j_mat.clone();
    for j in 0..n {
        r.column_mut(j).axpy(1.0, &u, 1.0);
    }
    Ok(NewtonMatrices { r, j: j_mat })
}

/// Linearized initial guess: minimizes `||(F - G) a||` under the constraint,
/// where column `j` of `G` holds the query-parameter forcing along snapshot
/// `j`'s own states. Costs `m*n` forcing evaluations.
pub fn initial_guess(
    basis: &BasisSet,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    trunc: TruncationRule,
) -> Result<DVector<f64>> {
    check_query(basis, s, model)?;
    let n = basis.len();
    let (m, p) = (basis.grid().len(), basis.state_dim());
    let weights = basis.weights();
    let mut r = basis.stacked_f().clone();
    let mut x = vec![0.0; p];
    let mut fval = vec![0.0; p];
    for j in 0..n {
        let snap = &basis.snapshots()[j];
        for i in 0..m {
            for c in 0..p {
                x[c] = snap.states[(i, c)];
            }
            eval_counted(model, counter, &x, basis.grid().points()[i], s, &mut fval);
            if !fval.iter().all(|v| v.is_finite()) {
                return Err(Error::EvaluationFailure {
                    time_index: i,
                    column: j,
                });
            }
            for c in 0..p {
                r[(i * p + c, j)] -= weights[i] * fval[c];
            }
        }
    }
    Ok(cls::solve_with_rule(&r, trunc)?.a)
}

/// The interpolated state at grid point `time_index` for coefficients `a`.
pub fn evaluate_state(basis: &BasisSet, a: &DVector<f64>, time_index: usize) -> Result<Vec<f64>> {
    let (m, p) = (basis.grid().len(), basis.state_dim());
    if a.len() != basis.len() {
        return Err(Error::invalid(format!(
            "coefficient length {} != basis size {}",
            a.len(),
            basis.len()
        )));
    }
    if time_index >= m {
        return Err(Error::invalid(format!(
            "time index {time_index} out of range 0..{m}"
        )));
    }
    let mut out = vec![0.0; p];
    for (j, &aj) in a.iter().enumerate() {
        for c in 0..p {
            out[c] += aj * basis.raw_x()[(time_index * p + c, j)];
        }
    }
    Ok(out)
}

fn spectral_norm(mat: &DMatrix<f64>) -> f64 {
    if mat.is_empty() {
        return 0.0;
    }
    mat.clone().svd(false, false).singular_values.max()
}

/// Renormalizes onto the constraint plane along the ray through the origin.
fn renormalize(a: &mut DVector<f64>) {
    let sum: f64 = a.iter().sum();
    if sum != 0.0 && sum.is_finite() {
        *a /= sum;
    }
}

/// Full Newton solve: initial guess, damped iteration, diagnostics.
///
/// All forcing evaluations are tallied on a local counter whose total is
/// folded into `counter` on return (also on error), so per-call accounting
/// stays exact under concurrent solves sharing one counter.
pub fn newton_solve(
    basis: &BasisSet,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    opts: &NewtonOptions,
) -> Result<InterpolationResult> {
    newton_solve_from(basis, s, model, counter, opts, None)
}

/// [`newton_solve`] seeded with an optional externally supplied start.
///
/// The warm point competes with the least-squares guess on the residual
/// objective (costing `m` extra evaluations) and the lower of the two seeds
/// the iteration, so `rho_star` never exceeds the warm point's residual. In
/// an enrichment sweep the previous basis' coefficients padded with a zero
/// for each new column stay feasible and make the obvious warm start.
pub fn newton_solve_from(
    basis: &BasisSet,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    opts: &NewtonOptions,
    warm: Option<&DVector<f64>>,
) -> Result<InterpolationResult> {
    let local = EvalCounter::new();
    let result = newton_solve_inner(basis, s, model, &local, opts, warm);
    counter.add(local.count());
    result
}

fn newton_solve_inner(
    basis: &BasisSet,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    opts: &NewtonOptions,
    warm: Option<&DVector<f64>>,
) -> Result<InterpolationResult> {
    opts.validate()?;
    check_query(basis, s, model)?;

    let mut a = initial_guess(basis, s, model, counter, opts.trunc)?;
    renormalize(&mut a);
    let mut base = residual(basis, &a, s, model, counter)?;
    if let Some(w) = warm {
        if w.len() != basis.len() {
            return Err(Error::invalid(format!(
                "warm start length {} != basis size {}",
                w.len(),
                basis.len()
            )));
        }
        let mut w = w.clone();
        renormalize(&mut w);
        let weval = residual(basis, &w, s, model, counter)?;
        if weval.rho <= base.rho {
            a = w;
            base = weval;
        }
    }
    let rho_initial = base.rho;

    let mut best_a = a.clone();
    let mut best = base.clone();
    let mut per_iter: Vec<IterationRecord> = Vec::new();
    let mut converged = base.rho <= opts.resid_tol;
    let mut aborted = false;
    let mut flat_streak = 0usize;

    while !converged && !aborted && per_iter.len() < opts.max_iters {
        let evals_before = counter.count();
        let nm = build_newton_matrix(basis, &a, s, model, counter, opts.fd_eps, &base)?;
        let sol: ClsSolution = cls::solve_with_rule(&nm.r, opts.trunc)?;
        let j_norm = spectral_norm(&nm.j);
        let delta = &sol.a - &a;
        let rho_before = base.rho;

        let (mut a_next, base_next) = match opts.damping {
            Damping::Off => {
                let mut cand = sol.a.clone();
                renormalize(&mut cand);
                let eval = residual(basis, &cand, s, model, counter)?;
                (cand, eval)
            }
            Damping::Halving => {
                let mut beta = 1.0;
                let mut pick = None;
                for _ in 0..30 {
                    let mut cand = &a + beta * &delta;
                    renormalize(&mut cand);
                    let eval = residual(basis, &cand, s, model, counter)?;
                    if eval.rho <= rho_before {
                        pick = Some((cand, eval));
                        break;
                    }
                    beta *= 0.5;
                }
                match pick {
                    Some(found) => found,
                    None => {
                        let mut cand = &a + beta * &delta;
                        renormalize(&mut cand);
                        let eval = residual(basis, &cand, s, model, counter)?;
                        (cand, eval)
                    }
                }
            }
        };

        let step_norm = (&a_next - &a).norm();
        per_iter.push(IterationRecord {
            rho: base_next.rho,
            rho_before,
            step_norm,
            sigma_min: sol.sigma_min,
            cond_full: sol.cond_full(),
            cond_used: sol.cond_used,
            trunc_rank: sol.trunc_rank,
            lagrange: sol.lagrange,
            j_norm,
            f_evals: counter.count() - evals_before,
        });

        if base_next.rho < best.rho {
            best_a = a_next.clone();
            best = base_next.clone();
        }
        if opts.damping == Damping::Halving {
            if base_next.rho >= rho_before {
                flat_streak += 1;
            } else {
                flat_streak = 0;
            }
            if flat_streak >= 3 {
                aborted = true;
            }
        }

        std::mem::swap(&mut a, &mut a_next);
        base = base_next;
        if base.rho <= opts.resid_tol || step_norm <= opts.step_tol {
            converged = true;
        }
    }

    let steps = per_iter.len();
    // A solve that stopped before its first step still reports the
    // conditioning of the Newton system at the starting point, so sweeps see
    // diagnostics for every query. The candidate step is measured, not taken;
    // a failure here (e.g. non-finite difference probes) only loses the
    // record, never a converged answer.
    if steps == 0 && opts.max_iters > 0 {
        if let Ok(rec) = probe_record(basis, &a, s, model, counter, opts, &base) {
            per_iter.push(rec);
        }
    }

    // Return the lowest-residual iterate seen; the last accepted one can be
    // worse after a forced damped move.
    let (mut a_out, out_eval) = if best.rho < base.rho {
        (best_a, best)
    } else {
        (a, base)
    };
    renormalize(&mut a_out);
    Ok(InterpolationResult {
        rho_star: out_eval.rho,
        rho_initial,
        iters: steps,
        per_iter,
        converged: converged && !aborted,
        f_evals: counter.count(),
        final_state: out_eval.xtilde,
        final_forcing: out_eval.forcing,
        a: a_out,
    })
}

/// Builds and factors the Newton system at `a` purely for its diagnostics.
fn probe_record(
    basis: &BasisSet,
    a: &DVector<f64>,
    s: &[f64],
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    opts: &NewtonOptions,
    base: &ResidualEval,
) -> Result<IterationRecord> {
    let evals_before = counter.count();
    let nm = build_newton_matrix(basis, a, s, model, counter, opts.fd_eps, base)?;
    let sol: ClsSolution = cls::solve_with_rule(&nm.r, opts.trunc)?;
    let mut cand = sol.a.clone();
    renormalize(&mut cand);
    Ok(IterationRecord {
        rho: base.rho,
        rho_before: base.rho,
        step_norm: (&cand - a).norm(),
        sigma_min: sol.sigma_min,
        cond_full: sol.cond_full(),
        cond_used: sol.cond_used,
        trunc_rank: sol.trunc_rank,
        lagrange: sol.lagrange,
        j_norm: spectral_norm(&nm.j),
        f_evals: counter.count() - evals_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{assemble_basis, build_snapshot, Snapshot};
    use crate::kinetics::KineticsModel;
    use crate::model::{make_time_grid, GridScheme, TimeGrid};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    /// f(x, t, s) = -s0 * x, so trajectories are x0 * exp(-s0 t) and the
    /// defect is linear in the coefficients.
    struct LinearDecay;
    impl ModelSystem for LinearDecay {
        fn state_dim(&self) -> usize {
            2
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn forcing_into(&self, x: &[f64], _t: f64, s: &[f64], out: &mut [f64]) {
            out[0] = -s[0] * x[0];
            out[1] = -s[0] * x[1];
        }
    }

    fn decay_basis(params: &[f64], m: usize) -> BasisSet {
        let grid = make_time_grid(0.0, 1.0, m, GridScheme::Uniform).unwrap();
        let snaps: Vec<Snapshot> = params
            .iter()
            .map(|&s| build_snapshot(&LinearDecay, &[s], &[1.0, 0.5], &grid, 1e-10, 1e-12).unwrap())
            .collect();
        assemble_basis(snaps).unwrap()
    }

    fn kinetics_basis(params: &[f64], m: usize) -> BasisSet {
        let grid = make_time_grid(0.0, 1.0, m, GridScheme::Uniform).unwrap();
        let snaps: Vec<Snapshot> = params
            .iter()
            .map(|&s| {
                build_snapshot(
                    &KineticsModel,
                    &[s],
                    &crate::kinetics::X0,
                    &grid,
                    1e-9,
                    1e-11,
                )
                .unwrap()
            })
            .collect();
        assemble_basis(snaps).unwrap()
    }

    #[test]
    fn residual_matches_direct_sum_and_counts_m_evals() {
        let basis = decay_basis(&[0.5, 2.0], 7);
        let counter = EvalCounter::new();
        let a = dvector![0.3, 0.7];
        let eval = residual(&basis, &a, &[1.0], &LinearDecay, &counter).unwrap();
        assert_eq!(counter.count(), 7);

        // Direct formula: h block i = w_i (F_i a + s * X_i a) for this model.
        let w = basis.weights().to_vec();
        let mut rho = 0.0;
        for i in 0..7 {
            for c in 0..2 {
                let xi =
                    basis.raw_x()[(i * 2 + c, 0)] * a[0] + basis.raw_x()[(i * 2 + c, 1)] * a[1];
                let fi =
                    basis.raw_f()[(i * 2 + c, 0)] * a[0] + basis.raw_f()[(i * 2 + c, 1)] * a[1];
                let h = w[i] * (fi + 1.0 * xi);
                assert_relative_eq!(eval.h[i * 2 + c], h, epsilon = 1e-13);
                rho += h * h;
            }
        }
        assert_relative_eq!(eval.rho, rho, max_relative = 1e-12);
        assert_relative_eq!(
            eval.xtilde[(0, 0)],
            0.3 * basis.raw_x()[(0, 0)] + 0.7 * basis.raw_x()[(0, 1)],
            epsilon = 1e-14
        );
    }

    #[test]
    fn constraint_violation_is_rejected() {
        let basis = decay_basis(&[0.5, 2.0], 4);
        let counter = EvalCounter::new();
        let err =
            residual(&basis, &dvector![0.3, 0.3], &[1.0], &LinearDecay, &counter).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // Just inside the tolerance passes.
        let a = dvector![0.5, 0.5 + 0.5e-10];
        assert!(residual(&basis, &a, &[1.0], &LinearDecay, &counter).is_ok());
    }

    #[test]
    fn newton_matrix_costs_exactly_n_m_evals() {
        let basis = kinetics_basis(&[0.1, 0.6, 1.1], 25);
        let counter = EvalCounter::new();
        let a = dvector![0.2, 0.5, 0.3];
        let base = residual(&basis, &a, &[0.4], &KineticsModel, &counter).unwrap();
        counter.reset();
        let _ =
            build_newton_matrix(&basis, &a, &[0.4], &KineticsModel, &counter, 1e-6, &base).unwrap();
        assert_eq!(counter.count(), 3 * 25);
    }

    #[test]
    fn fd_jacobian_matches_analytic_action_for_linear_model() {
        // For f = -s x the Jacobian action is exact up to rounding, so
        // J = F_stack + s * X_stack (weighted).
        let basis = decay_basis(&[0.5, 2.0, 3.0], 9);
        let counter = EvalCounter::new();
        let a = dvector![0.25, 0.25, 0.5];
        let s = [1.7];
        let base = residual(&basis, &a, &s, &LinearDecay, &counter).unwrap();
        let nm = build_newton_matrix(&basis, &a, &s, &LinearDecay, &counter, 1e-6, &base).unwrap();
        let expected = basis.stacked_f() + 1.7 * basis.stacked_x();
        for (got, want) in nm.j.iter().zip(expected.iter()) {
            assert_relative_eq!(*got, *want, epsilon = 1e-8, max_relative = 1e-7);
        }
        // R_k reproduces h on the constraint plane: R a = J a + h - J a = h.
        let ra = &nm.r * &a;
        for (got, want) in ra.iter().zip(base.h.iter()) {
            assert_relative_eq!(*got, *want, epsilon = 1e-10);
        }
    }

    #[test]
    fn fd_jacobian_matches_kinetics_analytic_jacobian() {
        let basis = kinetics_basis(&[0.3, 0.9], 12);
        let counter = EvalCounter::new();
        let a = dvector![0.6, 0.4];
        let s = [0.5];
        let base = residual(&basis, &a, &s, &KineticsModel, &counter).unwrap();
        let nm =
            build_newton_matrix(&basis, &a, &s, &KineticsModel, &counter, 1e-6, &base).unwrap();

        // Oracle: J[(i), j] = w_i (F_i e_j - Df(x~_i) X_i e_j).
        let w = basis.weights().to_vec();
        for i in 0..12 {
            let x = [
                base.xtilde[(i, 0)],
                base.xtilde[(i, 1)],
                base.xtilde[(i, 2)],
            ];
            let jac = crate::kinetics::jacobian(&x, 0.5).unwrap();
            for j in 0..2 {
                for c in 0..3 {
                    let mut act = 0.0;
                    for cc in 0..3 {
                        act += jac[(c, cc)] * basis.raw_x()[(i * 3 + cc, j)];
                    }
                    let want = basis.stacked_f()[(i * 3 + c, j)] - w[i] * act;
                    assert_relative_eq!(
                        nm.j[(i * 3 + c, j)],
                        want,
                        epsilon = 1e-4,
                        max_relative = 1e-3
                    );
                }
            }
        }
    }

    #[test]
    fn initial_guess_costs_mn_and_is_feasible() {
        let basis = kinetics_basis(&[0.2, 0.7, 1.2], 30);
        let counter = EvalCounter::new();
        let a = initial_guess(
            &basis,
            &[0.5],
            &KineticsModel,
            &counter,
            TruncationRule::default(),
        )
        .unwrap();
        assert_eq!(counter.count(), 3 * 30);
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn newton_on_linear_defect_converges_in_one_step() {
        // h(a) is linear in a for LinearDecay, so the first Newton step lands
        // on the global constrained minimizer and the second stalls.
        let basis = decay_basis(&[0.4, 1.0, 2.5], 20);
        let counter = EvalCounter::new();
        let opts = NewtonOptions {
            resid_tol: 1e-30,
            ..NewtonOptions::for_stack(40)
        };
        let res = newton_solve(&basis, &[1.3], &LinearDecay, &counter, &opts).unwrap();
        assert!(res.converged);
        assert!(res.iters <= 2, "iters = {}", res.iters);
        assert!(res.rho_star <= res.rho_initial * (1.0 + 1e-12));
        // Iterate 1 already reached the minimum.
        if res.iters == 2 {
            assert_relative_eq!(
                res.per_iter[0].rho,
                res.per_iter[1].rho,
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn max_iters_zero_returns_initial_guess() {
        let basis = kinetics_basis(&[0.2, 1.0], 15);
        let shared = EvalCounter::new();
        let opts = NewtonOptions {
            max_iters: 0,
            ..NewtonOptions::for_stack(45)
        };
        let res = newton_solve(&basis, &[0.6], &KineticsModel, &shared, &opts).unwrap();
        assert_eq!(res.iters, 0);
        assert!(res.per_iter.is_empty());
        assert_eq!(res.rho_star, res.rho_initial);
        // Initial guess (m*n) plus its residual evaluation (m).
        assert_eq!(res.f_evals, 2 * 15 + 15);
        assert_eq!(shared.count(), res.f_evals);

        let counter = EvalCounter::new();
        let guess = initial_guess(
            &basis,
            &[0.6],
            &KineticsModel,
            &counter,
            TruncationRule::default(),
        )
        .unwrap();
        for (x, y) in res.a.iter().zip(guess.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn stored_parameter_is_reproduced_exactly() {
        let basis = kinetics_basis(&[0.3, 0.7, 1.1], 40);
        for (j, &sj) in [0.3, 0.7, 1.1].iter().enumerate() {
            let counter = EvalCounter::new();
            let opts = NewtonOptions::for_stack(120);
            let res = newton_solve(&basis, &[sj], &KineticsModel, &counter, &opts).unwrap();
            assert!(res.converged);
            // Reconstruction matches the stored snapshot at every grid point.
            let snap = &basis.snapshots()[j];
            let scale = 1.0 + snap.states.amax();
            for i in 0..40 {
                let x = evaluate_state(&basis, &res.a, i).unwrap();
                for c in 0..3 {
                    assert!(
                        (x[c] - snap.states[(i, c)]).abs() <= 1e-8 * scale,
                        "point {i} comp {c}: {} vs {}",
                        x[c],
                        snap.states[(i, c)]
                    );
                }
            }
            assert!(res.rho_star <= 1e-16, "rho* = {}", res.rho_star);
        }
    }

    #[test]
    fn nearby_query_converges_and_improves_on_the_guess() {
        let basis = kinetics_basis(&[0.2, 0.5, 0.9, 1.2], 40);
        let counter = EvalCounter::new();
        let opts = NewtonOptions::for_stack(120);
        let res = newton_solve(&basis, &[0.65], &KineticsModel, &counter, &opts).unwrap();
        assert!(res.converged);
        assert!(res.rho_star < res.rho_initial);
        assert_relative_eq!(res.a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(res.f_evals, counter.count());
        // Eval accounting: guess (nm + m) plus per-iteration tallies.
        let per: u64 = res.per_iter.iter().map(|r| r.f_evals).sum();
        assert_eq!(res.f_evals, (4 * 40 + 40) as u64 + per);
        // The rho sequence is recorded as computed and ends at rho_star.
        assert_relative_eq!(
            res.per_iter.last().unwrap().rho,
            res.rho_star,
            max_relative = 1e-12
        );
    }

    #[test]
    fn conditioning_inequality_holds_on_recorded_iterations() {
        let basis = kinetics_basis(&[0.2, 0.5, 0.9, 1.2], 40);
        let counter = EvalCounter::new();
        let opts = NewtonOptions {
            resid_tol: 1e-28,
            ..NewtonOptions::for_stack(120)
        };
        for q in [0.1, 0.42, 0.65, 1.05] {
            let res = newton_solve(&basis, &[q], &KineticsModel, &counter, &opts).unwrap();
            for rec in &res.per_iter {
                let n = basis.len() as f64;
                let bound = n.sqrt() * (rec.j_norm * rec.step_norm + rec.rho_before.sqrt()) + 1e-10;
                assert!(
                    rec.sigma_min <= bound,
                    "sigma_min {} > bound {bound} at q={q}",
                    rec.sigma_min
                );
            }
        }
    }

    #[test]
    fn newton_step_equals_classical_constrained_step() {
        // Classical oracle: minimize ||J d + h|| over e^T d = 0 via the
        // nullspace parameterization, then a' = a + d.
        let basis = kinetics_basis(&[0.15, 0.45, 0.75, 1.05, 1.2], 30);
        let counter = EvalCounter::new();
        let s = [0.6];
        let a = initial_guess(
            &basis,
            &s,
            &KineticsModel,
            &counter,
            TruncationRule::Absolute(0.0),
        )
        .unwrap();
        let base = residual(&basis, &a, &s, &KineticsModel, &counter).unwrap();
        let nm =
            build_newton_matrix(&basis, &a, &s, &KineticsModel, &counter, 1e-6, &base).unwrap();

        let next = cls::solve_full(&nm.r).unwrap();
        assert_eq!(next.trunc_rank, 5);

        let n = basis.len();
        let mut z = DMatrix::zeros(n, n - 1);
        for k in 0..n - 1 {
            z[(k, k)] = 1.0;
            z[(k + 1, k)] = -1.0;
        }
        let jz = &nm.j * &z;
        let y = jz.svd(true, true).solve(&(-&base.h), 1e-14).unwrap();
        let oracle = &a + z * y;

        for (got, want) in next.a.iter().zip(oracle.iter()) {
            assert!(
                (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn coefficients_vary_continuously_between_stored_parameters() {
        // Fixed iteration count and truncation; adjacent-coefficient jumps
        // on a refining query grid shrink roughly linearly with the spacing.
        let basis = kinetics_basis(&[0.2, 0.7, 1.2], 25);
        let opts = NewtonOptions {
            max_iters: 3,
            resid_tol: 1e-300,
            step_tol: 1e-300,
            ..NewtonOptions::for_stack(75)
        };
        let max_jump = |pts: usize| -> f64 {
            let lo = 0.8;
            let hi = 1.1;
            let mut prev: Option<DVector<f64>> = None;
            let mut worst = 0.0f64;
            for k in 0..=pts {
                let s = lo + (hi - lo) * k as f64 / pts as f64;
                let counter = EvalCounter::new();
                let res = newton_solve(&basis, &[s], &KineticsModel, &counter, &opts).unwrap();
                if let Some(p) = &prev {
                    worst = worst.max((&res.a - p).amax());
                }
                prev = Some(res.a);
            }
            worst
        };
        let coarse = max_jump(8);
        let fine = max_jump(16);
        let finer = max_jump(32);
        assert!(fine <= 0.55 * coarse, "coarse {coarse}, fine {fine}");
        assert!(finer <= 0.55 * fine, "fine {fine}, finer {finer}");
    }

    #[test]
    fn singleton_basis_returns_unit_coefficient() {
        let basis = kinetics_basis(&[0.8], 10);
        let counter = EvalCounter::new();
        let res = newton_solve(
            &basis,
            &[0.3],
            &KineticsModel,
            &counter,
            &NewtonOptions::for_stack(30),
        )
        .unwrap();
        assert_eq!(res.a.len(), 1);
        assert_eq!(res.a[0], 1.0);
    }

    #[test]
    fn dimension_mismatches_are_invalid_arguments() {
        let basis = decay_basis(&[0.5, 2.0], 4);
        let counter = EvalCounter::new();
        let bad_param = residual(
            &basis,
            &dvector![0.5, 0.5],
            &[1.0, 2.0],
            &LinearDecay,
            &counter,
        );
        assert!(matches!(bad_param, Err(Error::InvalidArgument(_))));
        let bad_len = residual(&basis, &dvector![1.0], &[1.0], &LinearDecay, &counter);
        assert!(matches!(bad_len, Err(Error::InvalidArgument(_))));
        let err = newton_solve(
            &basis,
            &[1.0],
            &LinearDecay,
            &counter,
            &NewtonOptions {
                fd_eps: 0.0,
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_step_solve_still_records_newton_diagnostics() {
        // Querying a stored parameter converges before any step; the solver
        // still factors one Newton system so conditioning stays observable.
        let basis = kinetics_basis(&[0.3, 0.7, 1.1], 40);
        let counter = EvalCounter::new();
        let opts = NewtonOptions::for_stack(120);
        let res = newton_solve(&basis, &[0.7], &KineticsModel, &counter, &opts).unwrap();
        assert!(res.converged);
        assert_eq!(res.iters, 0);
        assert_eq!(res.per_iter.len(), 1);
        let rec = &res.per_iter[0];
        assert_eq!(rec.rho, res.rho_star);
        assert_eq!(rec.rho_before, res.rho_star);
        assert_eq!(rec.f_evals, 3 * 40);
        assert!(rec.cond_full >= 1.0);
        // Guess (nm + m) plus the probe factorization (nm).
        assert_eq!(res.f_evals, (3 * 40 + 40 + 3 * 40) as u64);
    }

    #[test]
    fn warm_start_caps_the_returned_residual() {
        let basis = kinetics_basis(&[0.2, 0.5, 0.9, 1.2], 40);
        let opts = NewtonOptions::for_stack(120);
        let counter = EvalCounter::new();
        let cold = newton_solve(&basis, &[0.65], &KineticsModel, &counter, &opts).unwrap();

        // Restarting from the converged coefficients cannot do worse, and the
        // seed shows up as the reported starting residual.
        let shared = EvalCounter::new();
        let hot = newton_solve_from(
            &basis,
            &[0.65],
            &KineticsModel,
            &shared,
            &opts,
            Some(&cold.a),
        )
        .unwrap();
        assert!(hot.rho_star <= cold.rho_star * (1.0 + 1e-12));
        assert!(hot.rho_initial <= cold.rho_star * (1.0 + 1e-12));

        // A deliberately wild warm point loses to the least-squares guess.
        let n = basis.len();
        let spread = DVector::from_fn(n, |j, _| if j == 0 { 3.0 } else { -2.0 / (n as f64 - 1.0) });
        let wild = newton_solve_from(
            &basis,
            &[0.65],
            &KineticsModel,
            &counter,
            &opts,
            Some(&spread),
        )
        .unwrap();
        assert_relative_eq!(wild.rho_initial, cold.rho_initial, max_relative = 1e-12);

        let short = newton_solve_from(
            &basis,
            &[0.65],
            &KineticsModel,
            &counter,
            &opts,
            Some(&dvector![1.0]),
        );
        assert!(matches!(short, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn time_grid_mismatch_with_final_time_basis() {
        // A final-time-only grid still interpolates: m = 1.
        let grid = TimeGrid::from_parts(vec![1.0], vec![1.0]).unwrap();
        let full = make_time_grid(0.0, 1.0, 50, GridScheme::Uniform).unwrap();
        let snaps: Vec<Snapshot> = [0.3, 0.8, 1.2]
            .iter()
            .map(|&sv| {
                let s = build_snapshot(
                    &KineticsModel,
                    &[sv],
                    &crate::kinetics::X0,
                    &full,
                    1e-9,
                    1e-11,
                )
                .unwrap();
                let last = s.states.nrows() - 1;
                Snapshot {
                    param: s.param.clone(),
                    grid: grid.clone(),
                    states: DMatrix::from_fn(1, 3, |_, c| s.states[(last, c)]),
                    forcing: DMatrix::from_fn(1, 3, |_, c| s.forcing[(last, c)]),
                }
            })
            .collect();
        let basis = assemble_basis(snaps).unwrap();
        let counter = EvalCounter::new();
        let res = newton_solve(
            &basis,
            &[0.8],
            &KineticsModel,
            &counter,
            &NewtonOptions::for_stack(3),
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.rho_star <= 1e-18);
    }
}
