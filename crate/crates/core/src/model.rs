//! Model abstraction, time grids, and evaluation counting.
//!
//! A [`ModelSystem`] is a parameterized autonomous-or-not ODE right-hand side
//! `f(x, t, s)` together with its dimensions and an optional analytic state
//! Jacobian. Residual quadrature happens on a [`TimeGrid`] that pairs each
//! time point with a squared weight; the two stock schemes cover a left-open
//! uniform rule and the trapezoid rule. All forcing evaluations that count
//! toward cost go through [`eval_counted`], which bumps a shared atomic
//! counter by exactly one per call.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side of a parameterized ODE system `dx/dt = f(x, t, s)`.
pub trait ModelSystem: Sync {
    /// Dimension of the state vector `x`.
    fn state_dim(&self) -> usize;

    /// Dimension of the parameter vector `s`.
    fn param_dim(&self) -> usize;

    /// Evaluates the forcing into `out`. Lengths must match the dimensions.
    fn forcing_into(&self, x: &[f64], t: f64, s: &[f64], out: &mut [f64]);

    /// Analytic state Jacobian `df/dx`, if the model provides one.
    fn state_jacobian(&self, _x: &[f64], _t: f64, _s: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Convenience allocation wrapper around [`ModelSystem::forcing_into`].
    fn forcing(&self, x: &[f64], t: f64, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.forcing_into(x, t, s, &mut out);
        out
    }
}

/// Thread-safe forcing-evaluation counter.
///
/// Increments are atomic, so concurrent counted evaluations aggregate without
/// lost updates.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one evaluation to the tally.
    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    /// Current tally.
    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    /// Folds another tally into this one (used to aggregate per-call local
    /// counters into a shared total).
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    /// Resets the tally to zero.
    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Counted entry point for forcing evaluations.
///
/// Every call increments `counter` by exactly one and evaluates the model
/// forcing into `out`.
pub fn eval_counted(
    model: &dyn ModelSystem,
    counter: &EvalCounter,
    x: &[f64],
    t: f64,
    s: &[f64],
    out: &mut [f64],
) {
    counter.increment();
    model.forcing_into(x, t, s, out);
}

/// Quadrature scheme for [`make_time_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridScheme {
    /// `m` points `t_j = t_start + j*dt`, `dt = span/m`; excludes `t_start`,
    /// includes `t_end`; every squared weight equals `dt`.
    Uniform,
    /// `m >= 2` points spanning both endpoints with spacing
    /// `dt = span/(m-1)`; interior squared weights `dt`, endpoints `dt/2`.
    Trapezoid,
}

/// Discrete time grid with squared quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    sq_weights: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from raw parts, validating monotonicity and positivity.
    pub fn from_parts(points: Vec<f64>, sq_weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("time grid must contain at least one point"));
        }
        if points.len() != sq_weights.len() {
            return Err(Error::invalid(format!(
                "time grid has {} points but {} weights",
                points.len(),
                sq_weights.len()
            )));
        }
        if !points.iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("time grid points must be finite"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "time grid points must be strictly increasing",
            ));
        }
        if !sq_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::invalid(
                "squared quadrature weights must be positive",
            ));
        }
        Ok(Self { points, sq_weights })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn sq_weights(&self) -> &[f64] {
        &self.sq_weights
    }

    /// Number of grid points `m`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Square roots of the quadrature weights, in grid order.
    pub fn weights(&self) -> Vec<f64> {
        self.sq_weights.iter().map(|w| w.sqrt()).collect()
    }
}

/// Builds a [`TimeGrid`] over `[t_start, t_end]` with `m` points.
pub fn make_time_grid(t_start: f64, t_end: f64, m: usize, scheme: GridScheme) -> Result<TimeGrid> {
    if !(t_start.is_finite() && t_end.is_finite()) {
        return Err(Error::invalid("time grid endpoints must be finite"));
    }
    if t_end <= t_start {
        return Err(Error::invalid(format!(
            "time grid needs t_end > t_start, got [{t_start}, {t_end}]"
        )));
    }
    if m == 0 {
        return Err(Error::invalid("time grid needs at least one point"));
    }
    let span = t_end - t_start;
    match scheme {
        GridScheme::Uniform => {
            let dt = span / m as f64;
            let points = (1..=m)
                .map(|j| t_start + span * j as f64 / m as f64)
                .collect();
            let sq_weights = vec![dt; m];
            TimeGrid::from_parts(points, sq_weights)
        }
        GridScheme::Trapezoid => {
            if m < 2 {
                return Err(Error::invalid("trapezoid grid needs at least two points"));
            }
            let dt = span / (m - 1) as f64;
            let points = (0..m)
                .map(|j| t_start + span * j as f64 / (m - 1) as f64)
                .collect();
            let mut sq_weights = vec![dt; m];
            sq_weights[0] = dt / 2.0;
            sq_weights[m - 1] = dt / 2.0;
            TimeGrid::from_parts(points, sq_weights)
        }
    }
}
