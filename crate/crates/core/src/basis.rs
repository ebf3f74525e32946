//! Snapshot bases: construction, stacking, windowing, and greedy enrichment.
//!
//! A [`Snapshot`] stores one full-model trajectory and its forcing history on
//! the shared time grid. A [`BasisSet`] stacks `n` snapshots into the
//! `mp x n` matrices the interpolator consumes: block `i` of the weighted
//! stacks holds `w_i * x_j(t_i)` (respectively `w_i * f(x_j(t_i), t_i, s_j)`)
//! as columns, with `w_i` the square root of the grid's squared weight.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSystem, TimeGrid};
use crate::ode::{self, Trajectory};

/// One stored full-model solution at a parameter point.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub param: Vec<f64>,
    pub grid: TimeGrid,
    /// `m x p`; row `i` is `x(t_i)`.
    pub states: DMatrix<f64>,
    /// `m x p`; row `i` is `f(x(t_i), t_i, s)`.
    pub forcing: DMatrix<f64>,
}

/// An ordered snapshot collection with precomputed stacks.
#[derive(Debug, Clone)]
pub struct BasisSet {
    snapshots: Vec<Snapshot>,
    grid: TimeGrid,
    weights: Vec<f64>,
    stacked_x: DMatrix<f64>,
    stacked_f: DMatrix<f64>,
    raw_x: DMatrix<f64>,
    raw_f: DMatrix<f64>,
}

impl BasisSet {
    /// Number of basis elements `n`.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// State dimension `p`.
    pub fn state_dim(&self) -> usize {
        self.snapshots[0].states.ncols()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.snapshots.iter().map(|s| s.param.as_slice()).collect()
    }

    /// Square-rooted quadrature weights `w_i`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted stack: block `i`, column `j` is `w_i * x_j(t_i)`.
    pub fn stacked_x(&self) -> &DMatrix<f64> {
        &self.stacked_x
    }

    /// Weighted stack of forcing histories.
    pub fn stacked_f(&self) -> &DMatrix<f64> {
        &self.stacked_f
    }

    /// Unweighted stack of state histories.
    pub fn raw_x(&self) -> &DMatrix<f64> {
        &self.raw_x
    }

    /// Unweighted stack of forcing histories.
    pub fn raw_f(&self) -> &DMatrix<f64> {
        &self.raw_f
    }
}

/// Integrates the model at `s` and records states plus forcing history
/// (`m` extra forcing evaluations at the grid points).
pub fn build_snapshot(
    model: &dyn ModelSystem,
    s: &[f64],
    x0: &[f64],
    grid: &TimeGrid,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Snapshot> {
    let traj = ode::integrate(model, x0, s, grid, rel_tol, abs_tol)?;
    snapshot_from_trajectory(model, &traj)
}

/// Wraps an existing trajectory as a snapshot, evaluating the forcing once
/// per grid point.
pub fn snapshot_from_trajectory(model: &dyn ModelSystem, traj: &Trajectory) -> Result<Snapshot> {
    let m = traj.grid().len();
    let p = model.state_dim();
    let mut forcing = DMatrix::zeros(m, p);
    let mut buf = vec![0.0; p];
    for i in 0..m {
        let x = traj.state(i);
        model.forcing_into(&x, traj.grid().points()[i], traj.param(), &mut buf);
        if !buf.iter().all(|v| v.is_finite()) {
            return Err(Error::EvaluationFailure {
                time_index: i,
                column: 0,
            });
        }
        forcing.row_mut(i).copy_from_slice(&buf);
    }
    Ok(Snapshot {
        param: traj.param().to_vec(),
        grid: traj.grid().clone(),
        states: traj.states().clone(),
        forcing,
    })
}

/// Stacks snapshots sharing one grid and state dimension into a basis.
pub fn assemble_basis(snapshots: Vec<Snapshot>) -> Result<BasisSet> {
    if snapshots.is_empty() {
        return Err(Error::invalid("basis needs at least one snapshot"));
    }
    let grid = snapshots[0].grid.clone();
    let p = snapshots[0].states.ncols();
    let d = snapshots[0].param.len();
    for (j, snap) in snapshots.iter().enumerate() {
        if snap.grid != grid {
            return Err(Error::invalid(format!(
                "snapshot {j} is on a different time grid"
            )));
        }
        if snap.states.ncols() != p || snap.forcing.ncols() != p {
            return Err(Error::invalid(format!(
                "snapshot {j} has a different state dimension"
            )));
        }
        if snap.states.nrows() != grid.len() || snap.forcing.nrows() != grid.len() {
            return Err(Error::invalid(format!(
                "snapshot {j} row count differs from the grid"
            )));
        }
        if snap.param.len() != d {
            return Err(Error::invalid(format!(
                "snapshot {j} has a different parameter dimension"
            )));
        }
    }

    let (m, n) = (grid.len(), snapshots.len());
    let weights = grid.weights();
    let mut stacked_x = DMatrix::zeros(m * p, n);
    let mut stacked_f = DMatrix::zeros(m * p, n);
    let mut raw_x = DMatrix::zeros(m * p, n);
    let mut raw_f = DMatrix::zeros(m * p, n);
    for (j, snap) in snapshots.iter().enumerate() {
        for i in 0..m {
            let w = weights[i];
            for c in 0..p {
                let row = i * p + c;
                raw_x[(row, j)] = snap.states[(i, c)];
                raw_f[(row, j)] = snap.forcing[(i, c)];
                stacked_x[(row, j)] = w * snap.states[(i, c)];
                stacked_f[(row, j)] = w * snap.forcing[(i, c)];
            }
        }
    }
    Ok(BasisSet {
        snapshots,
        grid,
        weights,
        stacked_x,
        stacked_f,
        raw_x,
        raw_f,
    })
}

/// Restricts the basis to the `m_window` snapshots nearest `s` in Euclidean
/// distance (ties to the lower index), preserving the original ordering.
/// Returns the sub-basis and the selected original indices.
pub fn select_window(
    basis: &BasisSet,
    s: &[f64],
    m_window: usize,
) -> Result<(BasisSet, Vec<usize>)> {
    let n = basis.len();
    if m_window == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    if m_window > n {
        return Err(Error::invalid(format!(
            "window {m_window} exceeds basis size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let dist = |j: usize| -> f64 {
        basis.snapshots[j]
            .param
            .iter()
            .zip(s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(m_window).collect();
    selected.sort_unstable();
    let sub: Vec<Snapshot> = selected
        .iter()
        .map(|&j| basis.snapshots[j].clone())
        .collect();
    Ok((assemble_basis(sub)?, selected))
}

/// Evaluates `score` at every candidate in parallel; deterministic output
/// order.
pub fn greedy_scores<F>(score: F, candidates: &[Vec<f64>]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    candidates.par_iter().map(|s| score(s)).collect()
}

/// Index and value of the maximal score; ties go to the lower index.
pub fn pick_max(scores: &[f64]) -> Result<(usize, f64)> {
    if scores.is_empty() {
        return Err(Error::invalid(
            "greedy selection needs at least one candidate",
        ));
    }
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    Ok((best, scores[best]))
}

/// Greedy enrichment step: the candidate maximizing the residual score.
pub fn greedy_next<F>(score: F, candidates: &[Vec<f64>]) -> Result<(usize, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pick_max(&greedy_scores(score, candidates))
}

/// Indices and scores of the top `k` candidates, score-descending with
/// index tie-breaks.
pub fn greedy_top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i, scores[i])).collect()
}
