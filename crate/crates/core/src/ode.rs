//! Adaptive explicit Runge-Kutta integration for the truth ("full model")
//! trajectories.
//!
//! The method is the Dormand-Prince embedded 5(4) pair with a PI step-size
//! controller and cubic Hermite dense output, which is plenty for the
//! kinetics benchmark down to `s = 0.005` at the default tolerances
//! (rel 1e-8 / abs 1e-10). The heat benchmark uses the implicit integrator in
//! [`crate::heat`] instead.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelSystem, TimeGrid};

/// Default relative tolerance for snapshot generation.
pub const DEFAULT_REL_TOL: f64 = 1e-8;
/// Default absolute tolerance for snapshot generation.
pub const DEFAULT_ABS_TOL: f64 = 1e-10;

/// A solution sampled on a [`TimeGrid`]; row `i` of `states` is `x(t_i)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: TimeGrid,
    states: DMatrix<f64>,
    param: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory, validating shape and finiteness.
    pub fn new(grid: TimeGrid, states: DMatrix<f64>, param: Vec<f64>) -> Result<Self> {
        if states.nrows() != grid.len() {
            return Err(Error::invalid(format!(
                "trajectory has {} state rows for a {}-point grid",
                states.nrows(),
                grid.len()
            )));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("trajectory states must be finite"));
        }
        Ok(Self {
            grid,
            states,
            param,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `m x p` state matrix; row `i` is `x(t_i)`.
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn param(&self) -> &[f64] {
        &self.param
    }

    /// State at grid index `i` as an owned vector.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.states.row(i).iter().copied().collect()
    }
}

/// Counters describing one adaptive integration.
#[derive(Debug, Clone, Copy, Default)]
pub struct IntegrationStats {
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    pub rhs_evals: u64,
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights equal the last tableau row (FSAL); the embedded
// fourth-order weights below give the error estimate.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Controller {
    h: f64,
    err_prev: f64,
}

impl Controller {
    const SAFETY: f64 = 0.9;
    const ALPHA: f64 = 0.17; // 1/5 - 0.75*beta
    const BETA: f64 = 0.04;

    fn next_h(&mut self, err: f64, accepted: bool) {
        let err = err.max(1e-12);
        let mut fac = Self::SAFETY * err.powf(-Self::ALPHA) * self.err_prev.powf(Self::BETA);
        fac = fac.clamp(0.2, 5.0);
        if !accepted {
            fac = fac.min(1.0);
        }
        self.h *= fac;
        if accepted {
            self.err_prev = err;
        }
    }
}

/// Integrates `dx/dt = f(x, t, s)` from `t = 0`, `x(0) = x0`, sampling the
/// solution at the `out_grid` points through dense output.
pub fn integrate(
    model: &dyn ModelSystem,
    x0: &[f64],
    s: &[f64],
    out_grid: &TimeGrid,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Trajectory> {
    integrate_with_stats(model, x0, s, out_grid, rel_tol, abs_tol).map(|(tr, _)| tr)
}

/// As [`integrate`], also returning step and evaluation counters.
pub fn integrate_with_stats(
    model: &dyn ModelSystem,
    x0: &[f64],
    s: &[f64],
    out_grid: &TimeGrid,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<(Trajectory, IntegrationStats)> {
    let p = model.state_dim();
    if x0.len() != p {
        return Err(Error::invalid(format!(
            "x0 has length {}, model needs {p}",
            x0.len()
        )));
    }
    if s.len() != model.param_dim() {
        return Err(Error::invalid(format!(
            "parameter has length {}, model needs {}",
            s.len(),
            model.param_dim()
        )));
    }
    if !(rel_tol > 0.0 && abs_tol > 0.0) {
        return Err(Error::invalid("tolerances must be positive"));
    }
    if out_grid.points()[0] < 0.0 {
        return Err(Error::invalid("output grid must lie in t >= 0"));
    }

    let t_end = *out_grid.points().last().unwrap();
    let mut stats = IntegrationStats::default();
    let mut states = DMatrix::zeros(out_grid.len(), p);
    let mut out_idx = 0usize;

    let mut t = 0.0;
    let mut y = DVector::from_column_slice(x0);
    let mut scratch = vec![0.0; p];
    let mut rhs = |t: f64, y: &DVector<f64>, stats: &mut IntegrationStats| -> DVector<f64> {
        stats.rhs_evals += 1;
        model.forcing_into(y.as_slice(), t, s, &mut scratch);
        DVector::from_column_slice(&scratch)
    };
    let mut f = rhs(t, &y, &mut stats);

    // Grid points at t = 0 take the initial state directly.
    while out_idx < out_grid.len() && out_grid.points()[out_idx] <= 0.0 {
        states.row_mut(out_idx).copy_from_slice(y.as_slice());
        out_idx += 1;
    }

    let h_init = {
        let scaled_norm = |v: &DVector<f64>, yref: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for i in 0..v.len() {
                let sk = abs_tol + rel_tol * yref[i].abs();
                acc += (v[i] / sk) * (v[i] / sk);
            }
            (acc / v.len() as f64).sqrt()
        };
        let d0 = scaled_norm(&y, &y);
        let d1 = scaled_norm(&f, &y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let y1 = &y + &f * h0;
        let f1 = rhs(h0, &y1, &mut stats);
        let d2 = scaled_norm(&(&f1 - &f), &y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(t_end)
    };
    let mut ctrl = Controller {
        h: h_init,
        err_prev: 1e-4,
    };

    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(p); 7];
    const MAX_STEPS: u64 = 50_000_000;

    while t < t_end {
        if stats.steps_accepted + stats.steps_rejected > MAX_STEPS {
            return Err(Error::IntegrationFailure {
                last_t: t,
                reason: "step budget exhausted".into(),
            });
        }
        let h = ctrl.h.min(t_end - t);
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::IntegrationFailure {
                last_t: t,
                reason: "step size underflow".into(),
            });
        }

        k[0] = f.clone();
        for stage in 1..7 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate().take(stage) {
                if A[stage][j] != 0.0 {
                    yi.axpy(h * A[stage][j], kj, 1.0);
                }
            }
            k[stage] = rhs(t + C[stage] * h, &yi, &mut stats);
        }
        // Stage 7 state is the fifth-order solution (FSAL).
        let mut y_new = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[6][j] != 0.0 {
                y_new.axpy(h * A[6][j], kj, 1.0);
            }
        }
        let f_new = k[6].clone();

        let mut err_sq = 0.0;
        let mut finite = y_new.iter().all(|v| v.is_finite());
        if finite {
            for i in 0..p {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += (A[6].get(j).copied().unwrap_or(0.0) - B4[j]) * kj[i];
                }
                e *= h;
                let sk = abs_tol + rel_tol * y[i].abs().max(y_new[i].abs());
                err_sq += (e / sk) * (e / sk);
            }
            finite = err_sq.is_finite();
        }
        let err = if finite {
            (err_sq / p as f64).sqrt()
        } else {
            1e10
        };

        if err <= 1.0 {
            // Emit every output point inside (t, t+h] by cubic Hermite
            // interpolation; the right endpoint reproduces y_new exactly.
            while out_idx < out_grid.len() && out_grid.points()[out_idx] <= t + h + 1e-14 * t_end {
                let tp = out_grid.points()[out_idx].min(t + h);
                let theta = ((tp - t) / h).clamp(0.0, 1.0);
                let xi = hermite(theta, h, &y, &f, &y_new, &f_new);
                states.row_mut(out_idx).copy_from_slice(xi.as_slice());
                out_idx += 1;
            }
            t += h;
            y = y_new;
            f = f_new;
            stats.steps_accepted += 1;
            ctrl.next_h(err, true);
        } else {
            stats.steps_rejected += 1;
            ctrl.next_h(err, false);
        }
    }

    debug_assert_eq!(out_idx, out_grid.len());
    let traj = Trajectory::new(out_grid.clone(), states, s.to_vec())?;
    Ok((traj, stats))
}

/// Cubic Hermite in the incremental form `y0 + theta*d + theta*(theta-1) *
/// [theta*(h*f0 + h*f1 - 2d) + (d - h*f0)]` with `d = y1 - y0`, which
/// reproduces the endpoints (and any constant solution) exactly.
fn hermite(
    theta: f64,
    h: f64,
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    y1: &DVector<f64>,
    f1: &DVector<f64>,
) -> DVector<f64> {
    let delta = y1 - y0;
    let mut inner = &delta * (-2.0);
    inner.axpy(h, f0, 1.0);
    inner.axpy(h, f1, 1.0);
    let mut bracket = inner * theta;
    bracket += &delta;
    bracket.axpy(-h, f0, 1.0);
    let mut out = y0.clone();
    out.axpy(theta, &delta, 1.0);
    out.axpy(theta * (theta - 1.0), &bracket, 1.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_time_grid, GridScheme};
    use approx::assert_relative_eq;

    struct Decay;
    impl ModelSystem for Decay {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            0
        }
        fn forcing_into(&self, x: &[f64], _t: f64, _s: &[f64], out: &mut [f64]) {
            out[0] = -x[0];
        }
    }

    struct Still;
    impl ModelSystem for Still {
        fn state_dim(&self) -> usize {
            2
        }
        fn param_dim(&self) -> usize {
            0
        }
        fn forcing_into(&self, _x: &[f64], _t: f64, _s: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn exponential_decay_hits_closed_form() {
        let grid = make_time_grid(0.0, 1.0, 1, GridScheme::Uniform).unwrap();
        let traj = integrate(&Decay, &[1.0], &[], &grid, 1e-8, 1e-10).unwrap();
        assert_relative_eq!(traj.state(0)[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn zero_forcing_keeps_the_state_constant() {
        let grid = make_time_grid(0.0, 2.0, 17, GridScheme::Trapezoid).unwrap();
        let traj = integrate(&Still, &[3.25, -1.5], &[], &grid, 1e-8, 1e-10).unwrap();
        for i in 0..grid.len() {
            assert_eq!(traj.state(i), vec![3.25, -1.5]);
        }
    }

    #[test]
    fn kinetics_small_s_is_finite_and_self_convergent() {
        let grid = make_time_grid(0.0, 1.0, 300, GridScheme::Uniform).unwrap();
        let model = crate::kinetics::KineticsModel;
        let a = integrate(&model, &crate::kinetics::X0, &[1.2], &grid, 1e-8, 1e-10).unwrap();
        let b = integrate(&model, &crate::kinetics::X0, &[1.2], &grid, 5e-9, 5e-11).unwrap();
        let mut max_rel = 0.0f64;
        for i in 0..grid.len() {
            for c in 0..3 {
                assert!(a.states()[(i, c)].is_finite());
                let denom = 1.0 + a.states()[(i, c)].abs();
                max_rel = max_rel.max((a.states()[(i, c)] - b.states()[(i, c)]).abs() / denom);
            }
        }
        assert!(max_rel < 10.0 * 1e-8, "self-convergence error {max_rel}");
    }

    #[test]
    fn observed_order_matches_design_order() {
        // Fixed-step sweeps of the tableau itself, so step control cannot
        // skew the measurement: halving h must cut the endpoint error by
        // about 2^5 on a smooth problem.
        let rhs = |y: f64| -y;
        let mut errs = Vec::new();
        for steps in [8usize, 16, 32] {
            let h = 1.0 / steps as f64;
            let mut y = 1.0f64;
            for _ in 0..steps {
                let mut k = [0.0f64; 7];
                k[0] = rhs(y);
                for stage in 1..7 {
                    let mut yi = y;
                    for (j, kj) in k.iter().enumerate().take(stage) {
                        yi += h * A[stage][j] * kj;
                    }
                    k[stage] = rhs(yi);
                }
                for (j, kj) in k.iter().enumerate().take(6) {
                    y += h * A[6][j] * kj;
                }
            }
            errs.push((y - (-1.0f64).exp()).abs());
        }
        let o1 = (errs[0] / errs[1]).log2();
        let o2 = (errs[1] / errs[2]).log2();
        assert!((o1 - 5.0).abs() < 0.4, "observed order {o1} ({errs:?})");
        assert!((o2 - 5.0).abs() < 0.4, "observed order {o2} ({errs:?})");
    }

    #[test]
    fn tightening_tolerance_does_not_worsen_error() {
        let grid = make_time_grid(0.0, 1.0, 4, GridScheme::Uniform).unwrap();
        let exact: Vec<f64> = grid.points().iter().map(|t| (-t).exp()).collect();
        let mut errs = Vec::new();
        for tol in [1e-4, 1e-6, 1e-8, 1e-10] {
            let traj = integrate(&Decay, &[1.0], &[], &grid, tol, tol * 1e-2).unwrap();
            let err: f64 = (0..grid.len())
                .map(|i| (traj.state(i)[0] - exact[i]).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{errs:?}");
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let grid = make_time_grid(0.0, 1.0, 4, GridScheme::Uniform).unwrap();
        assert!(integrate(&Decay, &[1.0, 2.0], &[], &grid, 1e-8, 1e-10).is_err());
        assert!(integrate(&Decay, &[1.0], &[], &grid, -1.0, 1e-10).is_err());
        let neg = TimeGrid::from_parts(vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(integrate(&Decay, &[1.0], &[], &neg, 1e-8, 1e-10).is_err());
    }
}
