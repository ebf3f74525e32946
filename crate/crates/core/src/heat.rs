//! 2-D nonlinear transient heat conduction benchmark.
//!
//! Semidiscretizes `rho_c dT/dt = div(kappa(T) grad T)` on a rectangle with
//! conservative finite differences and exposes the result as a
//! [`ModelSystem`], so the interpolator consumes it unchanged. Nodes sit at
//! full spacing from Dirichlet boundaries (boundary values live on the
//! boundary itself) and at half spacing from no-flux boundaries (the zero
//! flux is enforced by mirror symmetry exactly on the physical edge). Face
//! conductivities are harmonic means, which keeps the flux continuous across
//! cells and the operator exact for linear and quadratic profiles under
//! constant conductivity.
//!
//! Time integration is implicit: an embedded BDF1/BDF2 pair with PI-free
//! step control on their difference, inner nonlinear solves by damped
//! fixed-point iteration on the conductivity, and a banded Cholesky
//! factorization (bandwidth `nx`) for the linear systems.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::conductivity::KlBasis;
use crate::error::{Error, Result};
use crate::model::{ModelSystem, TimeGrid};
use crate::ode::Trajectory;

/// Critical temperature for the default quantity of interest, °C.
pub const DEFAULT_THRESHOLD: f64 = 1000.0;
/// Default QoI evaluation time, s.
pub const DEFAULT_EVAL_TIME: f64 = 70.0;
/// Residual tolerance of the inner fixed-point solves.
pub const PICARD_TOL: f64 = 1e-8;

/// Boundary-condition kind along one edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Dirichlet,
    NoFlux,
}

/// Per-edge boundary layout. The default is the study configuration:
/// heated (Dirichlet) left and bottom edges, insulated right and top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeLayout {
    pub left: EdgeKind,
    pub bottom: EdgeKind,
    pub right: EdgeKind,
    pub top: EdgeKind,
}

impl Default for EdgeLayout {
    fn default() -> Self {
        EdgeLayout {
            left: EdgeKind::Dirichlet,
            bottom: EdgeKind::Dirichlet,
            right: EdgeKind::NoFlux,
            top: EdgeKind::NoFlux,
        }
    }
}

impl EdgeLayout {
    pub fn all_dirichlet() -> Self {
        EdgeLayout {
            left: EdgeKind::Dirichlet,
            bottom: EdgeKind::Dirichlet,
            right: EdgeKind::Dirichlet,
            top: EdgeKind::Dirichlet,
        }
    }

    pub fn all_no_flux() -> Self {
        EdgeLayout {
            left: EdgeKind::NoFlux,
            bottom: EdgeKind::NoFlux,
            right: EdgeKind::NoFlux,
            top: EdgeKind::NoFlux,
        }
    }
}

/// Rectangle geometry and material constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatDomain {
    /// Side lengths, m.
    pub lx: f64,
    pub ly: f64,
    /// Interior unknowns per direction.
    pub nx: usize,
    pub ny: usize,
    /// Volumetric heat capacity, J/(m^3 K).
    pub rho_c: f64,
    /// Uniform initial temperature, °C.
    pub init_temp: f64,
}

impl Default for HeatDomain {
    fn default() -> Self {
        HeatDomain {
            lx: 0.1,
            ly: 0.2,
            nx: 21,
            ny: 41,
            rho_c: 3.6e6,
            init_temp: 20.0,
        }
    }
}

impl HeatDomain {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Flattened row-major index (x fastest).
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    fn validate(&self) -> Result<()> {
        if !(self.lx > 0.0) || !(self.ly > 0.0) {
            return Err(Error::invalid("domain side lengths must be positive"));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::invalid(
                "grid needs at least two unknowns per direction",
            ));
        }
        if !(self.rho_c > 0.0) {
            return Err(Error::invalid("volumetric heat capacity must be positive"));
        }
        Ok(())
    }
}

fn edge_offset(kind: EdgeKind) -> f64 {
    match kind {
        EdgeKind::Dirichlet => 1.0,
        EdgeKind::NoFlux => 0.5,
    }
}

/// Quantity-of-interest configuration: fraction of the domain hotter than
/// `threshold` at `eval_time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoIConfig {
    pub threshold: f64,
    pub eval_time: f64,
}

impl Default for QoIConfig {
    fn default() -> Self {
        QoIConfig {
            threshold: DEFAULT_THRESHOLD,
            eval_time: DEFAULT_EVAL_TIME,
        }
    }
}

impl QoIConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1250.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "QoI threshold {} outside [0, 1250]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Ramped boundary temperature along the heated perimeter, °C.
///
/// `x` is the arclength along the heated edges, measured from the bottom-left
/// corner along the bottom edge first (`x = x1` on the bottom, `x = Lx + x2`
/// on the left edge).
pub fn boundary_temp(x: f64, t: f64) -> f64 {
    ((98.0 / 3.0) * t - 6000.0 * x - 700.0).clamp(20.0, 1100.0)
}

/// Conductivity model: a constant, or the lognormal KL field.
#[derive(Debug, Clone)]
pub enum Conductivity {
    Constant(f64),
    Field(KlBasis),
}

impl Conductivity {
    pub fn param_dim(&self) -> usize {
        match self {
            Conductivity::Constant(_) => 0,
            Conductivity::Field(kl) => kl.truncation(),
        }
    }

    fn eval(&self, temp: f64, s: &[f64]) -> f64 {
        match self {
            Conductivity::Constant(k) => *k,
            Conductivity::Field(kl) => kl.kappa(temp, s),
        }
    }
}

/// Dirichlet boundary data as a function of position and time, °C.
pub type BoundaryFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// The semidiscrete heat model.
#[derive(Clone)]
pub struct HeatModel {
    domain: HeatDomain,
    layout: EdgeLayout,
    conductivity: Conductivity,
    boundary: Arc<BoundaryFn>,
    hx: f64,
    hy: f64,
}

impl fmt::Debug for HeatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeatModel")
            .field("domain", &self.domain)
            .field("layout", &self.layout)
            .field("conductivity", &self.conductivity)
            .finish_non_exhaustive()
    }
}

impl HeatModel {
    pub fn new(
        domain: HeatDomain,
        layout: EdgeLayout,
        conductivity: Conductivity,
        boundary: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        domain.validate()?;
        if let Conductivity::Constant(k) = conductivity {
            if !(k > 0.0) {
                return Err(Error::invalid("constant conductivity must be positive"));
            }
        }
        let hx = domain.lx
            / (domain.nx as f64 - 1.0 + edge_offset(layout.left) + edge_offset(layout.right));
        let hy = domain.ly
            / (domain.ny as f64 - 1.0 + edge_offset(layout.bottom) + edge_offset(layout.top));
        Ok(HeatModel {
            domain,
            layout,
            conductivity,
            boundary: Arc::new(boundary),
            hx,
            hy,
        })
    }

    /// The study configuration: default domain, heated left/bottom edges
    /// with the arclength ramp, KL conductivity field.
    pub fn study(kl: KlBasis) -> Self {
        let domain = HeatDomain::default();
        let lx = domain.lx;
        Self::new(
            domain,
            EdgeLayout::default(),
            Conductivity::Field(kl),
            move |x, y, t| {
                let arc = if y == 0.0 { x } else { lx + y };
                boundary_temp(arc, t)
            },
        )
        .expect("default study configuration is valid")
    }

    pub fn domain(&self) -> &HeatDomain {
        &self.domain
    }

    pub fn layout(&self) -> &EdgeLayout {
        &self.layout
    }

    pub fn conductivity(&self) -> &Conductivity {
        &self.conductivity
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.hx, self.hy)
    }

    pub fn node_x(&self, i: usize) -> f64 {
        (edge_offset(self.layout.left) + i as f64) * self.hx
    }

    pub fn node_y(&self, j: usize) -> f64 {
        (edge_offset(self.layout.bottom) + j as f64) * self.hy
    }

    /// Visits every flux face of every cell: `visit(cell, neighbor, coef,
    /// boundary_value)` where `coef = kappa_face / h^2`. Interior faces pass
    /// `Some(neighbor)`; Dirichlet faces pass `None` plus the boundary
    /// temperature; no-flux faces are skipped (their mirror contribution is
    /// identically zero).
    fn for_each_face<F: FnMut(usize, Option<usize>, f64, f64)>(
        &self,
        kappa_cells: &[f64],
        t: f64,
        s: &[f64],
        mut visit: F,
    ) {
        let (nx, ny) = (self.domain.nx, self.domain.ny);
        let ihx2 = 1.0 / (self.hx * self.hx);
        let ihy2 = 1.0 / (self.hy * self.hy);
        let harm = |a: f64, b: f64| 2.0 * a * b / (a + b);
        for j in 0..ny {
            let y = self.node_y(j);
            for i in 0..nx {
                let c = self.domain.index(i, j);
                let kc = kappa_cells[c];
                // West
                if i > 0 {
                    let nb = self.domain.index(i - 1, j);
                    visit(c, Some(nb), harm(kc, kappa_cells[nb]) * ihx2, 0.0);
                } else if self.layout.left == EdgeKind::Dirichlet {
                    let tb = (self.boundary)(0.0, y, t);
                    visit(c, None, harm(kc, self.conductivity.eval(tb, s)) * ihx2, tb);
                }
                // East
                if i + 1 < nx {
                    let nb = self.domain.index(i + 1, j);
                    visit(c, Some(nb), harm(kc, kappa_cells[nb]) * ihx2, 0.0);
                } else if self.layout.right == EdgeKind::Dirichlet {
                    let tb = (self.boundary)(self.domain.lx, y, t);
                    visit(c, None, harm(kc, self.conductivity.eval(tb, s)) * ihx2, tb);
                }
                // South
                if j > 0 {
                    let nb = self.domain.index(i, j - 1);
                    visit(c, Some(nb), harm(kc, kappa_cells[nb]) * ihy2, 0.0);
                } else if self.layout.bottom == EdgeKind::Dirichlet {
                    let x = self.node_x(i);
                    let tb = (self.boundary)(x, 0.0, t);
                    visit(c, None, harm(kc, self.conductivity.eval(tb, s)) * ihy2, tb);
                }
                // North
                if j + 1 < ny {
                    let nb = self.domain.index(i, j + 1);
                    visit(c, Some(nb), harm(kc, kappa_cells[nb]) * ihy2, 0.0);
                } else if self.layout.top == EdgeKind::Dirichlet {
                    let x = self.node_x(i);
                    let tb = (self.boundary)(x, self.domain.ly, t);
                    visit(c, None, harm(kc, self.conductivity.eval(tb, s)) * ihy2, tb);
                }
            }
        }
    }

    fn kappa_cells(&self, temps: &[f64], s: &[f64]) -> Vec<f64> {
        temps
            .iter()
            .map(|&t| self.conductivity.eval(t, s))
            .collect()
    }

    /// `(1/rho_c) div(kappa grad T)` at every unknown.
    pub fn semidiscrete_forcing(&self, temps: &[f64], t: f64, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domain.cells()];
        let kappa = self.kappa_cells(temps, s);
        self.for_each_face(&kappa, t, s, |c, nb, coef, tb| {
            let other = match nb {
                Some(k) => temps[k],
                None => tb,
            };
            out[c] += coef * (other - temps[c]);
        });
        let inv = 1.0 / self.domain.rho_c;
        for v in &mut out {
            *v *= inv;
        }
        out
    }

    /// Assembles `M = I + beta A` (SPD, banded) and the right-hand side
    /// `rhs_hist + beta b`, where `A` carries the `kappa_face/h^2` face
    /// coefficients (conductivities frozen at `kappa_source`) and `b` the
    /// Dirichlet contributions.
    fn assemble(
        &self,
        kappa_source: &[f64],
        t: f64,
        s: &[f64],
        beta: f64,
        rhs_hist: &DVector<f64>,
    ) -> (BandedSpd, DVector<f64>) {
        let p = self.domain.cells();
        let kappa = self.kappa_cells(kappa_source, s);
        let mut m = BandedSpd::identity(p, self.domain.nx);
        let mut rhs = rhs_hist.clone();
        self.for_each_face(&kappa, t, s, |c, nb, coef, tb| {
            m.add_diag(c, beta * coef);
            match nb {
                Some(k) => {
                    if k < c {
                        m.add_off(c, k, -beta * coef);
                    }
                }
                None => rhs[c] += beta * coef * tb,
            }
        });
        (m, rhs)
    }
}

impl ModelSystem for HeatModel {
    fn state_dim(&self) -> usize {
        self.domain.cells()
    }

    fn param_dim(&self) -> usize {
        self.conductivity.param_dim()
    }

    fn forcing_into(&self, x: &[f64], t: f64, s: &[f64], out: &mut [f64]) {
        let f = self.semidiscrete_forcing(x, t, s);
        out.copy_from_slice(&f);
    }
}

/// Area-weighted fraction of unknowns above the threshold (cells are
/// uniform, so this is a plain count fraction).
pub fn qoi_fraction(temps: &[f64], domain: &HeatDomain, cfg: &QoIConfig) -> f64 {
    let hot = temps.iter().filter(|t| **t > cfg.threshold).count();
    hot as f64 / domain.cells() as f64
}

/// Symmetric positive-definite banded matrix, lower-band storage:
/// `band[(k, j)] = A[j + k, j]` for `k = 0..=bw`.
struct BandedSpd {
    n: usize,
    bw: usize,
    band: DMatrix<f64>,
}

impl BandedSpd {
    fn identity(n: usize, bw: usize) -> Self {
        let mut band = DMatrix::zeros(bw + 1, n);
        for j in 0..n {
            band[(0, j)] = 1.0;
        }
        BandedSpd { n, bw, band }
    }

    fn add_diag(&mut self, j: usize, v: f64) {
        self.band[(0, j)] += v;
    }

    /// Adds to `A[i, j]` with `i > j`, `i - j <= bw`.
    fn add_off(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i > j && i - j <= self.bw);
        self.band[(i - j, j)] += v;
    }

    fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for j in 0..self.n {
            y[j] += self.band[(0, j)] * x[j];
            let top = self.bw.min(self.n - 1 - j);
            for k in 1..=top {
                let a = self.band[(k, j)];
                y[j + k] += a * x[j];
                y[j] += a * x[j + k];
            }
        }
        y
    }

    /// In-place banded Cholesky `A = L L^T`.
    fn cholesky(mut self) -> Result<BandedChol> {
        let (n, bw) = (self.n, self.bw);
        for j in 0..n {
            let start = j.saturating_sub(bw);
            let mut d = self.band[(0, j)];
            for k in start..j {
                let l = self.band[(j - k, k)];
                d -= l * l;
            }
            if d <= 0.0 {
                return Err(Error::NumericalFailure(format!(
                    "banded Cholesky broke down at row {j} (pivot {d:.3e})"
                )));
            }
            let dj = d.sqrt();
            self.band[(0, j)] = dj;
            let top = bw.min(n - 1 - j);
            for r in 1..=top {
                let i = j + r;
                let mut s = self.band[(r, j)];
                let lo = i.saturating_sub(bw);
                for k in lo..j {
                    s -= self.band[(i - k, k)] * self.band[(j - k, k)];
                }
                self.band[(r, j)] = s / dj;
            }
        }
        Ok(BandedChol {
            n: self.n,
            bw: self.bw,
            band: self.band,
        })
    }
}

struct BandedChol {
    n: usize,
    bw: usize,
    band: DMatrix<f64>,
}

impl BandedChol {
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut x = b.clone();
        // Forward: L y = b.
        for j in 0..n {
            x[j] /= self.band[(0, j)];
            let top = bw.min(n - 1 - j);
            for r in 1..=top {
                x[j + r] -= self.band[(r, j)] * x[j];
            }
        }
        // Backward: L^T x = y.
        for j in (0..n).rev() {
            let top = bw.min(n - 1 - j);
            for r in 1..=top {
                x[j] -= self.band[(r, j)] * x[j + r];
            }
            x[j] /= self.band[(0, j)];
        }
        x
    }
}

fn scaled_rms(diff: &DVector<f64>, reference: &DVector<f64>, rtol: f64, atol: f64) -> f64 {
    let n = diff.len() as f64;
    let sum: f64 = diff
        .iter()
        .zip(reference.iter())
        .map(|(d, r)| {
            let sc = atol + rtol * r.abs();
            (d / sc) * (d / sc)
        })
        .sum();
    (sum / n).sqrt()
}

/// One implicit solve `T - beta_eff * rho_c^{-1} div(kappa(T) grad T) =
/// rhs_hist` by damped fixed-point iteration on the conductivity.
fn implicit_step(
    model: &HeatModel,
    s: &[f64],
    t_new: f64,
    dt_eff: f64,
    rhs_hist: &DVector<f64>,
    guess: &DVector<f64>,
) -> Result<DVector<f64>> {
    let beta = dt_eff / model.domain.rho_c;
    let mut current = guess.clone();
    let mut omega = 1.0f64;
    let mut prev_res = f64::INFINITY;
    let (mut m, mut rhs) = model.assemble(current.as_slice(), t_new, s, beta, rhs_hist);
    for _ in 0..50 {
        let chol = m.cholesky()?;
        let solved = chol.solve(&rhs);
        let cand = if omega == 1.0 {
            solved
        } else {
            &current + (solved - &current) * omega
        };
        let (m_next, rhs_next) = model.assemble(cand.as_slice(), t_new, s, beta, rhs_hist);
        let res = {
            let g = m_next.mul_vec(&cand) - &rhs_next;
            (g.norm_squared() / g.len() as f64).sqrt()
        };
        if res <= PICARD_TOL {
            return Ok(cand);
        }
        if res > 0.9999 * prev_res {
            omega = (0.5 * omega).max(1.0 / 64.0);
        }
        prev_res = res;
        current = cand;
        m = m_next;
        rhs = rhs_next;
    }
    Err(Error::NumericalFailure(format!(
        "fixed-point iteration stagnated at t = {t_new:.6e} (residual {prev_res:.3e})"
    )))
}

/// Integrates the semidiscrete system from the domain's uniform initial
/// temperature, sampling at `grid_out`.
pub fn solve_heat(
    model: &HeatModel,
    s: &[f64],
    grid_out: &TimeGrid,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Trajectory> {
    let t0 = vec![model.domain.init_temp; model.domain.cells()];
    solve_heat_from(model, s, &t0, grid_out, rel_tol, abs_tol)
}

/// As [`solve_heat`] but starting from an arbitrary temperature field.
pub fn solve_heat_from(
    model: &HeatModel,
    s: &[f64],
    init: &[f64],
    grid_out: &TimeGrid,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Trajectory> {
    let p = model.domain.cells();
    if init.len() != p {
        return Err(Error::invalid(format!(
            "initial field has {} entries (expected {p})",
            init.len()
        )));
    }
    if s.len() != model.param_dim() {
        return Err(Error::invalid(format!(
            "parameter length {} != conductivity dimension {}",
            s.len(),
            model.param_dim()
        )));
    }
    if !(rel_tol > 0.0) || !(abs_tol > 0.0) {
        return Err(Error::invalid("tolerances must be positive"));
    }
    let points = grid_out.points();
    if points[0] < 0.0 {
        return Err(Error::invalid("output grid must start at t >= 0"));
    }

    let m_out = points.len();
    let mut states = DMatrix::zeros(m_out, p);
    let mut emitted = 0usize;
    let mut state = DVector::from_column_slice(init);
    while emitted < m_out && points[emitted] == 0.0 {
        states.row_mut(emitted).copy_from_slice(state.as_slice());
        emitted += 1;
    }
    if emitted == m_out {
        return Trajectory::new(grid_out.clone(), states, s.to_vec());
    }

    let t_end = points[m_out - 1];
    let min_dt = 1e-12 * (1.0 + t_end);
    let mut t = 0.0f64;
    let mut dt = (1e-5 * t_end).min(points[emitted] - t).max(min_dt);
    let mut hist: Option<(DVector<f64>, f64)> = None; // (previous state, dt used)
    let mut rejects_in_a_row = 0usize;
    let mut guard = 0usize;

    while emitted < m_out {
        guard += 1;
        if guard > 5_000_000 {
            return Err(Error::IntegrationFailure {
                last_t: t,
                reason: "step limit exceeded".into(),
            });
        }
        let target = points[emitted];
        // Land on the target exactly rather than trusting t + (target - t)
        // to round back to it.
        let hits_target = dt >= target - t;
        let dt_now = if hits_target { target - t } else { dt };
        let t_new = if hits_target { target } else { t + dt_now };

        let attempt: Result<(DVector<f64>, f64)> = (|| {
            match &hist {
                None => {
                    // First step: BDF1 against two half steps.
                    let full = implicit_step(model, s, t_new, dt_now, &state, &state)?;
                    let mid =
                        implicit_step(model, s, t + 0.5 * dt_now, 0.5 * dt_now, &state, &state)?;
                    let halves = implicit_step(model, s, t_new, 0.5 * dt_now, &mid, &mid)?;
                    let est = scaled_rms(&(&halves - &full), &halves, rel_tol, abs_tol);
                    Ok((halves, est))
                }
                Some((prev, dt_prev)) => {
                    let r = dt_now / dt_prev;
                    let predictor = &state + (&state - prev) * r;
                    let bdf1 = implicit_step(model, s, t_new, dt_now, &state, &predictor)?;
                    let c = 1.0 + 2.0 * r;
                    let hist_comb = (&state * ((1.0 + r) * (1.0 + r)) - prev * (r * r)) / c;
                    let dt_eff = dt_now * (1.0 + r) / c;
                    let bdf2 = implicit_step(model, s, t_new, dt_eff, &hist_comb, &bdf1)?;
                    let est = scaled_rms(&(&bdf2 - &bdf1), &bdf2, rel_tol, abs_tol);
                    Ok((bdf2, est))
                }
            }
        })();

        match attempt {
            Ok((new_state, est)) if est <= 1.0 => {
                rejects_in_a_row = 0;
                hist = Some((std::mem::replace(&mut state, new_state), dt_now));
                t = t_new;
                if hits_target {
                    states.row_mut(emitted).copy_from_slice(state.as_slice());
                    emitted += 1;
                }
                // Growth capped below 1 + sqrt(2), the zero-stability limit
                // on consecutive step ratios of variable-step second-order
                // backward differentiation.
                let factor = if est > 0.0 {
                    (0.9 / est.sqrt()).clamp(0.3, 2.3)
                } else {
                    2.3
                };
                dt = (dt_now * factor).max(min_dt);
            }
            Ok((_, est)) => {
                rejects_in_a_row += 1;
                let factor = (0.9 / est.sqrt()).clamp(0.1, 0.7);
                dt = dt_now * factor;
            }
            Err(_) => {
                rejects_in_a_row += 1;
                dt = 0.5 * dt_now;
            }
        }
        if dt < min_dt || rejects_in_a_row > 60 {
            return Err(Error::IntegrationFailure {
                last_t: t,
                reason: "step size collapsed in the implicit integrator".into(),
            });
        }
    }

    Trajectory::new(grid_out.clone(), states, s.to_vec())
}
