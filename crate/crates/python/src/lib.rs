//! Python bindings for the interpolation toolkit.
//!
//! The module mirrors the command-line surface at library granularity: build
//! or load a snapshot basis ([`Interpolator`]), run residual-minimizing
//! queries against it ([`Interpolator::solve`]), reconstruct states from the
//! returned coefficients, and inspect the log-conductivity field used by the
//! heat benchmark ([`KlField`]). Heavy numerics release the GIL.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use resmin::basis::{assemble_basis, build_snapshot, select_window, snapshot_from_trajectory};
use resmin::basis::{BasisSet, Snapshot};
use resmin::cls::{TruncationRule, DEFAULT_TAU_SCALE};
use resmin::conductivity::{KlBasis, DEFAULT_TRUNCATION};
use resmin::error::Error;
use resmin::heat::{solve_heat, HeatModel, DEFAULT_EVAL_TIME};
use resmin::interp::{
    evaluate_state, newton_solve_from, residual, Damping, NewtonOptions, DEFAULT_FD_EPS,
    DEFAULT_MAX_ITERS,
};
use resmin::kinetics::{self, KineticsModel, S_RANGE, T_RANGE, X0};
use resmin::model::{make_time_grid, EvalCounter, GridScheme, ModelSystem, TimeGrid};
use resmin::ode::integrate;
use resmin::rng::NormalSampler;
use resmin::store::{load_store, save_store};
use resmin::study::{HEAT_TRUTH_ATOL, HEAT_TRUTH_RTOL, KINETICS_TRUTH_ATOL, KINETICS_TRUTH_RTOL};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::InvalidArgument(_) => PyValueError::new_err(err.to_string()),
        Error::LoadFailure { .. } | Error::Io { .. } => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

/// Picks the benchmark model that matches a stored parameter dimension.
fn model_for(basis: &BasisSet) -> Result<Box<dyn ModelSystem + Send>, Error> {
    let d = basis.snapshots()[0].param.len();
    if d == 1 {
        Ok(Box::new(KineticsModel))
    } else if d == DEFAULT_TRUNCATION {
        Ok(Box::new(HeatModel::study(KlBasis::standard(
            DEFAULT_TRUNCATION,
        )?)))
    } else {
        Err(Error::InvalidArgument(format!(
            "no benchmark model has parameter dimension {d} (kinetics: 1, heat: {DEFAULT_TRUNCATION})"
        )))
    }
}

/// Outcome of one interpolation query.
///
/// `a` is always full-length: coefficients of basis columns outside the
/// active window are zero, and `slots` lists the columns that took part.
#[pyclass(module = "resmin_py")]
pub struct SolveResult {
    #[pyo3(get)]
    a: Vec<f64>,
    #[pyo3(get)]
    slots: Vec<usize>,
    #[pyo3(get)]
    rho_star: f64,
    #[pyo3(get)]
    rho_initial: f64,
    #[pyo3(get)]
    iters: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    f_evals: u64,
    /// Worst conditioning among the Newton systems, when any were factored.
    #[pyo3(get)]
    max_cond: Option<f64>,
}

#[pymethods]
impl SolveResult {
    fn __repr__(&self) -> String {
        format!(
            "SolveResult(rho_star={:.6e}, iters={}, converged={}, f_evals={})",
            self.rho_star, self.iters, self.converged, self.f_evals
        )
    }
}

/// Snapshot basis plus the model it was generated from.
#[pyclass(module = "resmin_py")]
pub struct Interpolator {
    basis: BasisSet,
    model: Box<dyn ModelSystem + Send>,
}

#[pymethods]
impl Interpolator {
    /// Integrates the reaction-kinetics benchmark at each parameter and
    /// assembles the trajectories into a basis.
    #[staticmethod]
    #[pyo3(signature = (params, grid_points = 300))]
    pub fn kinetics(py: Python<'_>, params: Vec<f64>, grid_points: usize) -> PyResult<Self> {
        if params.is_empty() {
            return Err(PyValueError::new_err("at least one parameter is required"));
        }
        py.allow_threads(|| {
            let grid = make_time_grid(T_RANGE.0, T_RANGE.1, grid_points, GridScheme::Uniform)
                .map_err(to_py)?;
            let model = KineticsModel;
            let snaps: Vec<Snapshot> = params
                .iter()
                .map(|&s| {
                    build_snapshot(
                        &model,
                        &[s],
                        &X0,
                        &grid,
                        KINETICS_TRUTH_RTOL,
                        KINETICS_TRUTH_ATOL,
                    )
                })
                .collect::<Result<_, _>>()
                .map_err(to_py)?;
            let basis = assemble_basis(snaps).map_err(to_py)?;
            Ok(Self {
                basis,
                model: Box::new(KineticsModel),
            })
        })
    }

    /// Draws `count` conductivity-coefficient vectors and solves the heat
    /// benchmark at each, keeping only the evaluation-time temperature field.
    #[staticmethod]
    #[pyo3(signature = (count = 20, seed = 2024))]
    pub fn heat(py: Python<'_>, count: usize, seed: u64) -> PyResult<Self> {
        if count == 0 {
            return Err(PyValueError::new_err("count must be at least 1"));
        }
        py.allow_threads(|| {
            let kl = KlBasis::standard(DEFAULT_TRUNCATION).map_err(to_py)?;
            let model = HeatModel::study(kl);
            let d = ModelSystem::param_dim(&model);
            let grid = TimeGrid::from_parts(vec![DEFAULT_EVAL_TIME], vec![1.0]).map_err(to_py)?;
            let mut rng = NormalSampler::seed_from_u64(seed);
            let mut snaps = Vec::with_capacity(count);
            for _ in 0..count {
                let s = rng.standard_normal_vec(d);
                let traj = solve_heat(&model, &s, &grid, HEAT_TRUTH_RTOL, HEAT_TRUTH_ATOL)
                    .map_err(to_py)?;
                snaps.push(snapshot_from_trajectory(&model, &traj).map_err(to_py)?);
            }
            let basis = assemble_basis(snaps).map_err(to_py)?;
            Ok(Self {
                basis,
                model: Box::new(model),
            })
        })
    }

    /// Loads a snapshot store directory and infers its benchmark model from
    /// the parameter dimension.
    #[staticmethod]
    pub fn from_store(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        py.allow_threads(|| {
            let snaps = load_store(&path).map_err(to_py)?;
            let basis = assemble_basis(snaps).map_err(to_py)?;
            let model = model_for(&basis).map_err(to_py)?;
            Ok(Self { basis, model })
        })
    }

    /// Writes the basis snapshots as a store directory.
    pub fn save(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.allow_threads(|| {
            save_store(&path, self.basis.snapshots()).map_err(to_py)?;
            Ok(())
        })
    }

    #[getter]
    fn n_bases(&self) -> usize {
        self.basis.len()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.basis.state_dim()
    }

    #[getter]
    fn param_dim(&self) -> usize {
        self.basis.snapshots()[0].param.len()
    }

    /// Time-grid points of the stored trajectories.
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.basis.grid().points().to_vec()
    }

    /// Stored parameter vectors, one per basis column.
    #[getter]
    fn params(&self) -> Vec<Vec<f64>> {
        self.basis.params().iter().map(|s| s.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.basis.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Interpolator(n_bases={}, state_dim={}, param_dim={}, grid_points={})",
            self.basis.len(),
            self.basis.state_dim(),
            self.param_dim(),
            self.basis.grid().len()
        )
    }

    /// Runs a residual-minimizing query at parameter `s`.
    ///
    /// `window` limits the solve to that many nearest stored parameters
    /// (0 uses the full basis). `warm` seeds the iteration with a coefficient
    /// vector over the active columns; it competes with the built-in
    /// least-squares guess and the better starting residual wins.
    #[pyo3(signature = (
        s,
        window = 0,
        max_newton = DEFAULT_MAX_ITERS,
        fd_eps = DEFAULT_FD_EPS,
        trunc_tau = DEFAULT_TAU_SCALE,
        warm = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        &self,
        py: Python<'_>,
        s: Vec<f64>,
        window: usize,
        max_newton: usize,
        fd_eps: f64,
        trunc_tau: f64,
        warm: Option<Vec<f64>>,
    ) -> PyResult<SolveResult> {
        py.allow_threads(|| {
            let n = self.basis.len();
            let (active, slots): (BasisSet, Vec<usize>) = if window == 0 || window >= n {
                (self.basis.clone(), (0..n).collect())
            } else {
                select_window(&self.basis, &s, window).map_err(to_py)?
            };
            let mut opts = NewtonOptions::for_stack(active.stacked_f().nrows());
            opts.max_iters = max_newton;
            opts.fd_eps = fd_eps;
            opts.trunc = TruncationRule::Relative(trunc_tau);
            opts.damping = Damping::Halving;

            let counter = EvalCounter::new();
            let warm = warm.map(DVector::from_vec);
            let res = newton_solve_from(
                &active,
                &s,
                self.model.as_ref(),
                &counter,
                &opts,
                warm.as_ref(),
            )
            .map_err(to_py)?;

            let mut a = vec![0.0; n];
            for (k, &j) in slots.iter().enumerate() {
                a[j] = res.a[k];
            }
            let max_cond = res
                .per_iter
                .iter()
                .map(|r| r.cond_full)
                .max_by(f64::total_cmp);
            Ok(SolveResult {
                a,
                slots,
                rho_star: res.rho_star,
                rho_initial: res.rho_initial,
                iters: res.iters,
                converged: res.converged,
                f_evals: res.f_evals,
                max_cond,
            })
        })
    }

    /// Squared weighted defect of a full-length coefficient vector at `s`.
    pub fn rho(&self, py: Python<'_>, s: Vec<f64>, a: Vec<f64>) -> PyResult<f64> {
        py.allow_threads(|| {
            let a = DVector::from_vec(a);
            let counter = EvalCounter::new();
            let eval =
                residual(&self.basis, &a, &s, self.model.as_ref(), &counter).map_err(to_py)?;
            Ok(eval.rho)
        })
    }

    /// Reconstructs the interpolated state at one time-grid index from a
    /// full-length coefficient vector.
    pub fn state(&self, a: Vec<f64>, time_index: usize) -> PyResult<Vec<f64>> {
        let a = DVector::from_vec(a);
        evaluate_state(&self.basis, &a, time_index).map_err(to_py)
    }
}

/// Truncated Karhunen-Loeve expansion of the heat benchmark's
/// log-conductivity field.
#[pyclass(module = "resmin_py")]
pub struct KlField {
    kl: KlBasis,
}

#[pymethods]
impl KlField {
    #[new]
    #[pyo3(signature = (modes = DEFAULT_TRUNCATION))]
    pub fn new(modes: usize) -> PyResult<Self> {
        Ok(Self {
            kl: KlBasis::standard(modes).map_err(to_py)?,
        })
    }

    #[getter]
    fn modes(&self) -> usize {
        self.kl.truncation()
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.kl.nodes()
    }

    /// Retained covariance eigenvalues, largest first.
    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.kl.kl_eigs().to_vec()
    }

    #[getter]
    fn total_variance(&self) -> f64 {
        self.kl.total_variance()
    }

    /// Fraction of the total variance the retained modes carry.
    #[getter]
    fn captured_fraction(&self) -> f64 {
        self.kl.captured_fraction()
    }

    /// Temperature nodes the modes are tabulated on.
    #[getter]
    fn temp_grid(&self) -> Vec<f64> {
        self.kl.temp_grid().to_vec()
    }

    /// Tabulated values of one eigenmode.
    pub fn mode(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.kl.truncation() {
            return Err(PyValueError::new_err(format!(
                "mode index {index} out of range (truncation {})",
                self.kl.truncation()
            )));
        }
        Ok(self.kl.modes().column(index).iter().copied().collect())
    }

    /// Conductivity at temperature `t` for coefficient vector `s`.
    pub fn kappa(&self, t: f64, s: Vec<f64>) -> PyResult<f64> {
        if s.len() != self.kl.truncation() {
            return Err(PyValueError::new_err(format!(
                "coefficient length {} != truncation {}",
                s.len(),
                self.kl.truncation()
            )));
        }
        Ok(self.kl.kappa(t, &s))
    }

    /// Draws standard-normal coefficient vectors, one per row.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = NormalSampler::seed_from_u64(seed);
        (0..count)
            .map(|_| rng.standard_normal_vec(self.kl.truncation()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "KlField(modes={}, nodes={}, captured_fraction={:.6})",
            self.kl.truncation(),
            self.kl.nodes(),
            self.kl.captured_fraction()
        )
    }
}

/// Right-hand side of the reaction-kinetics benchmark.
#[pyfunction]
fn kinetics_rhs(x: [f64; 3], s: f64) -> PyResult<Vec<f64>> {
    let f = kinetics::forcing(&x, s).map_err(to_py)?;
    Ok(f.to_vec())
}

/// Integrates the reaction-kinetics benchmark and returns `(times, states)`
/// with one state row per grid point.
#[pyfunction]
#[pyo3(signature = (s, grid_points = 300, rel_tol = KINETICS_TRUTH_RTOL, abs_tol = KINETICS_TRUTH_ATOL))]
fn integrate_kinetics(
    py: Python<'_>,
    s: f64,
    grid_points: usize,
    rel_tol: f64,
    abs_tol: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    py.allow_threads(|| {
        let grid = make_time_grid(T_RANGE.0, T_RANGE.1, grid_points, GridScheme::Uniform)
            .map_err(to_py)?;
        let traj = integrate(&KineticsModel, &X0, &[s], &grid, rel_tol, abs_tol).map_err(to_py)?;
        let times = grid.points().to_vec();
        let states = (0..traj.states().nrows())
            .map(|i| traj.states().row(i).iter().copied().collect())
            .collect();
        Ok((times, states))
    })
}

#[pymodule]
pub fn resmin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Interpolator>()?;
    m.add_class::<SolveResult>()?;
    m.add_class::<KlField>()?;
    m.add_function(wrap_pyfunction!(kinetics_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_kinetics, m)?)?;
    m.add("KINETICS_S_RANGE", S_RANGE)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
