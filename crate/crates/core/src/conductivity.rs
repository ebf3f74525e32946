//! Stochastic thermal conductivity: lognormal field over temperature with a
//! squared-exponential correlation kernel, realized through a truncated
//! discrete KL expansion.
//!
//! The mean trend follows the Eurocode carbon-steel curve
//! `kappa_mean(T) = -0.0333 T + 54` below 800 °C and `27.30` above, the
//! log-standard deviation grows as `sigma_Y(T) = 0.08 + 0.004 sqrt(T)`, and a
//! realization is
//!
//! ```text
//! kappa(T, s) = kappa_mean(T) * exp( sigma_Y(T) * sum_i phi_i(T) sqrt(l_i) s_i )
//! ```
//!
//! with `(l_i, phi_i)` the leading eigenpairs of the node correlation matrix
//! `C_ij = exp(-(T_i - T_j)^2 / gamma^2)`. Keeping the mean factor outside
//! the exponential makes `s = 0` reproduce the mean trend exactly.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default node count for the temperature grid.
pub const DEFAULT_NODES: usize = 600;
/// Temperature range covered by the discrete field, °C.
pub const TEMP_RANGE: (f64, f64) = (0.0, 1250.0);
/// Squared correlation length, (°C)²; the length itself is `sqrt(500)`.
pub const GAMMA_SQ: f64 = 500.0;
/// Default KL truncation.
pub const DEFAULT_TRUNCATION: usize = 11;

/// Eurocode mean conductivity trend, W/(m·K).
pub fn mean_kappa(t: f64) -> f64 {
    if t < 800.0 {
        -0.0333 * t + 54.0
    } else {
        27.30
    }
}

/// Temperature-dependent log-standard deviation.
pub fn sigma_y(t: f64) -> f64 {
    0.08 + 0.004 * t.max(0.0).sqrt()
}

/// Uniform temperature nodes spanning [`TEMP_RANGE`].
pub fn temp_grid(nodes: usize) -> Result<Vec<f64>> {
    if nodes < 2 {
        return Err(Error::invalid("temperature grid needs at least two nodes"));
    }
    let (lo, hi) = TEMP_RANGE;
    Ok((0..nodes)
        .map(|i| lo + (hi - lo) * i as f64 / (nodes - 1) as f64)
        .collect())
}

/// Squared-exponential correlation matrix `exp(-(T_i - T_j)^2 / gamma^2)`.
pub fn correlation_matrix(grid: &[f64], gamma: f64) -> Result<DMatrix<f64>> {
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(Error::invalid(
            "correlation length must be nonzero and finite",
        ));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "temperature grid must be sorted and strictly increasing",
        ));
    }
    let g2 = gamma * gamma;
    let n = grid.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = 1.0;
        for j in 0..i {
            let d = grid[i] - grid[j];
            let v = (-d * d / g2).exp();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Truncated KL basis of the conductivity log-fluctuation field.
#[derive(Debug, Clone)]
pub struct KlBasis {
    temp_grid: Vec<f64>,
    /// `nodes x d`, columns sign-fixed (first nonzero component positive).
    modes: DMatrix<f64>,
    /// Top `d` eigenvalues, nonincreasing, clipped at zero.
    kl_eigs: Vec<f64>,
    corr_length: f64,
    /// Sum over ALL eigenvalues (equals the node count for a unit-diagonal
    /// kernel).
    total_variance: f64,
}

/// Top-`d` eigenpairs of the (symmetric) correlation matrix.
pub fn kl_decompose(
    grid: Vec<f64>,
    corr: &DMatrix<f64>,
    corr_length: f64,
    d: usize,
) -> Result<KlBasis> {
    let nodes = grid.len();
    if corr.nrows() != nodes || corr.ncols() != nodes {
        return Err(Error::invalid(format!(
            "correlation matrix is {}x{} but the grid has {nodes} nodes",
            corr.nrows(),
            corr.ncols()
        )));
    }
    if d == 0 || d > nodes {
        return Err(Error::invalid(format!(
            "truncation {d} outside 1..={nodes}"
        )));
    }
    let asym = (corr - corr.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::invalid(format!(
            "correlation matrix asymmetric by {asym:.3e}"
        )));
    }

    let eig = corr.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..nodes).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total_variance: f64 = eig.eigenvalues.iter().sum();

    let mut kl_eigs = Vec::with_capacity(d);
    let mut modes = DMatrix::zeros(nodes, d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let lam = eig.eigenvalues[idx];
        if lam < -1e-10 {
            return Err(Error::NumericalFailure(format!(
                "correlation eigenvalue {lam:.3e} below the PSD tolerance"
            )));
        }
        kl_eigs.push(lam.max(0.0));
        let col = eig.eigenvectors.column(idx);
        let scale = col.amax();
        let flip = col
            .iter()
            .find(|v| v.abs() > 1e-12 * scale.max(1.0))
            .map_or(1.0, |v| if *v < 0.0 { -1.0 } else { 1.0 });
        for i in 0..nodes {
            modes[(i, k)] = flip * col[i];
        }
    }
    Ok(KlBasis {
        temp_grid: grid,
        modes,
        kl_eigs,
        corr_length,
        total_variance,
    })
}

impl KlBasis {
    /// Default field: 600 nodes on [0, 1250] °C, `gamma = sqrt(500)`,
    /// truncation `d`.
    pub fn standard(d: usize) -> Result<Self> {
        let grid = temp_grid(DEFAULT_NODES)?;
        let gamma = GAMMA_SQ.sqrt();
        let corr = correlation_matrix(&grid, gamma)?;
        kl_decompose(grid, &corr, gamma, d)
    }

    pub fn truncation(&self) -> usize {
        self.kl_eigs.len()
    }

    pub fn nodes(&self) -> usize {
        self.temp_grid.len()
    }

    pub fn temp_grid(&self) -> &[f64] {
        &self.temp_grid
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn kl_eigs(&self) -> &[f64] {
        &self.kl_eigs
    }

    pub fn corr_length(&self) -> f64 {
        self.corr_length
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Fraction of the field variance captured by the truncation.
    pub fn captured_fraction(&self) -> f64 {
        self.kl_eigs.iter().sum::<f64>() / self.total_variance
    }

    /// Log-fluctuation `sum_i phi_i(T) sqrt(l_i) s_i` with piecewise-linear
    /// mode interpolation; `t` must already lie inside the grid.
    fn fluctuation(&self, t: f64, s: &[f64]) -> f64 {
        let grid = &self.temp_grid;
        let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        let pos = (t - grid[0]) / h;
        let cell = (pos.floor() as usize).min(grid.len() - 2);
        let theta = (pos - cell as f64).clamp(0.0, 1.0);
        let mut z = 0.0;
        for (i, (&lam, &si)) in self.kl_eigs.iter().zip(s).enumerate() {
            let phi = (1.0 - theta) * self.modes[(cell, i)] + theta * self.modes[(cell + 1, i)];
            z += phi * lam.sqrt() * si;
        }
        z
    }

    /// Conductivity realization; out-of-range temperatures are clamped to
    /// the nearest grid endpoint and flagged.
    pub fn kappa_flagged(&self, t: f64, s: &[f64]) -> (f64, bool) {
        assert_eq!(
            s.len(),
            self.truncation(),
            "coefficient length != truncation"
        );
        let lo = self.temp_grid[0];
        let hi = self.temp_grid[self.temp_grid.len() - 1];
        let (tc, clamped) = if t < lo {
            (lo, true)
        } else if t > hi {
            (hi, true)
        } else {
            (t, false)
        };
        let z = self.fluctuation(tc, s);
        (mean_kappa(tc) * (sigma_y(tc) * z).exp(), clamped)
    }

    /// Conductivity realization, ignoring the clamp flag.
    pub fn kappa(&self, t: f64, s: &[f64]) -> f64 {
        self.kappa_flagged(t, s).0
    }
}

/// Writes the mode table as CSV with columns `T,phi1,...,phid`.
pub fn write_modes_csv(path: &Path, kl: &KlBasis) -> Result<()> {
    let d = kl.truncation();
    let mut buf = String::from("T");
    for i in 1..=d {
        buf.push_str(&format!(",phi{i}"));
    }
    buf.push('\n');
    for (row, t) in kl.temp_grid().iter().enumerate() {
        buf.push_str(&format!("{t:.16e}"));
        for i in 0..d {
            buf.push_str(&format!(",{:.16e}", kl.modes()[(row, i)]));
        }
        buf.push('\n');
    }
    write_file(path, &buf)
}

/// Writes the eigenvalue list as CSV with columns `index,lambda`.
pub fn write_eigs_csv(path: &Path, kl: &KlBasis) -> Result<()> {
    let mut buf = String::from("index,lambda\n");
    for (i, lam) in kl.kl_eigs().iter().enumerate() {
        buf.push_str(&format!("{},{lam:.16e}\n", i + 1));
    }
    write_file(path, &buf)
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
