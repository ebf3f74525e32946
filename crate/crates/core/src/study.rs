//! End-to-end study drivers: the greedy convergence sweep on the reaction
//! kinetics benchmark and the windowed cross-validation on the heat
//! benchmark, plus the shared [`StudyConfig`] that the command line and the
//! drivers round-trip.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    best_linear_error, covariance_lower_bound, study_metrics_warm, write_convergence_csv,
    write_selected_per_point, ConvergenceRow, LowerBoundReport, StudyMetrics,
};
use crate::basis::{assemble_basis, pick_max, select_window, snapshot_from_trajectory, Snapshot};
use crate::cls::TruncationRule;
use crate::conductivity::{KlBasis, DEFAULT_TRUNCATION};
use crate::error::{Error, Result};
use crate::heat::{qoi_fraction, solve_heat, HeatModel, QoIConfig, DEFAULT_EVAL_TIME};
use crate::interp::{newton_solve, Damping, NewtonOptions};
use crate::kinetics::{KineticsModel, S_RANGE, T_RANGE, X0};
use crate::model::{make_time_grid, EvalCounter, GridScheme, TimeGrid};
use crate::ode::{integrate, Trajectory};
use crate::rng::NormalSampler;

/// Truth-solver tolerances for the kinetics sweep.
pub const KINETICS_TRUTH_RTOL: f64 = 1e-9;
pub const KINETICS_TRUTH_ATOL: f64 = 1e-12;
/// Truth-solver tolerances for the heat cross-validation.
pub const HEAT_TRUTH_RTOL: f64 = 1e-6;
pub const HEAT_TRUTH_ATOL: f64 = 1e-6;
/// Quadrature size for the projection lower bound.
pub const BOUND_QUAD_NODES: usize = 200;
/// Basis sizes whose per-point diagnostics are written out.
pub const PER_POINT_CAPTURE: [usize; 4] = [5, 10, 20, 40];

/// Which benchmark a configuration drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Kinetics,
    Heat,
}

/// How basis parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum BasisStrategy {
    /// Start from the parameter-range endpoints and repeatedly add the
    /// evaluation point with the largest optimal residual.
    Greedy,
    /// `count` seeded draws (uniform over the scan range for scalar
    /// parameters, standard normal for field coefficients).
    Random { seed: u64, count: usize },
}

/// Where the error metrics are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalGridSpec {
    /// Left-open uniform scan `s_k = s_min + k*(s_max - s_min)/count`.
    Scan {
        s_min: f64,
        s_max: f64,
        count: usize,
    },
    /// Seeded standard-normal draws in the full parameter space.
    Draws { seed: u64, count: usize },
}

/// Resolved study configuration; serializes to the JSON config file accepted
/// by the command line and echoed into every run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub basis: BasisStrategy,
    /// Largest basis size of the sweep (greedy) or the basis size (random).
    pub n_bases: usize,
    /// Nearest-neighbor window size; 0 uses the full basis.
    pub window: usize,
    /// Relative truncation scale of the constrained least-squares solves.
    pub trunc_tau: f64,
    pub max_newton: usize,
    pub fd_eps: f64,
    pub eval_grid: EvalGridSpec,
    pub out_dir: PathBuf,
}

impl StudyConfig {
    /// The kinetics convergence sweep: greedy enrichment from the range
    /// endpoints up to 40 bases, evaluated on the 300-point scan.
    pub fn kinetics_default(out_dir: impl Into<PathBuf>) -> Self {
        StudyConfig {
            study: StudyKind::Kinetics,
            basis: BasisStrategy::Greedy,
            n_bases: 40,
            window: 0,
            trunc_tau: crate::cls::DEFAULT_TAU_SCALE,
            max_newton: crate::interp::DEFAULT_MAX_ITERS,
            fd_eps: crate::interp::DEFAULT_FD_EPS,
            eval_grid: EvalGridSpec::Scan {
                s_min: S_RANGE.0,
                s_max: S_RANGE.1,
                count: 300,
            },
            out_dir: out_dir.into(),
        }
    }

    /// The heat cross-validation: 20 random bases, 5-wide windows, 100
    /// held-out draws.
    pub fn heat_default(out_dir: impl Into<PathBuf>) -> Self {
        StudyConfig {
            study: StudyKind::Heat,
            basis: BasisStrategy::Random {
                seed: 2024,
                count: 20,
            },
            n_bases: 20,
            window: 5,
            trunc_tau: crate::cls::DEFAULT_TAU_SCALE,
            max_newton: crate::interp::DEFAULT_MAX_ITERS,
            fd_eps: crate::interp::DEFAULT_FD_EPS,
            eval_grid: EvalGridSpec::Draws {
                seed: 2025,
                count: 100,
            },
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bases < 1 {
            return Err(Error::invalid("a study needs at least one basis"));
        }
        if !(self.trunc_tau >= 0.0) {
            return Err(Error::invalid("truncation scale must be >= 0"));
        }
        if !(self.fd_eps > 0.0) {
            return Err(Error::invalid("finite-difference scale must be positive"));
        }
        if let BasisStrategy::Random { count, .. } = self.basis {
            if count != self.n_bases {
                return Err(Error::invalid(format!(
                    "random draw count {count} disagrees with n_bases {}",
                    self.n_bases
                )));
            }
        }
        match self.eval_grid {
            EvalGridSpec::Scan {
                s_min,
                s_max,
                count,
            } => {
                if !(s_max > s_min) || count == 0 {
                    return Err(Error::invalid(
                        "scan grid needs s_max > s_min and count > 0",
                    ));
                }
            }
            EvalGridSpec::Draws { count, .. } => {
                if count == 0 {
                    return Err(Error::invalid("draw grid needs count > 0"));
                }
            }
        }
        if self.window > self.n_bases {
            return Err(Error::invalid(format!(
                "window {} exceeds basis size {}",
                self.window, self.n_bases
            )));
        }
        Ok(())
    }

    /// Newton options derived from this configuration for an `mp`-row stack.
    pub fn newton_options(&self, stack_rows: usize) -> NewtonOptions {
        let mut opts = NewtonOptions::for_stack(stack_rows);
        opts.max_iters = self.max_newton;
        opts.fd_eps = self.fd_eps;
        opts.trunc = TruncationRule::Relative(self.trunc_tau);
        opts.damping = Damping::Halving;
        opts
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    code_version: &'static str,
    config: &'a StudyConfig,
    seeds: BTreeMap<&'static str, u64>,
    truth_rel_tol: f64,
    truth_abs_tol: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut body =
        serde_json::to_string_pretty(value).map_err(|e| Error::NumericalFailure(e.to_string()))?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_manifest(
    dir: &Path,
    config: &StudyConfig,
    seeds: BTreeMap<&'static str, u64>,
    truth_rel_tol: f64,
    truth_abs_tol: f64,
) -> Result<()> {
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION"),
        config,
        seeds,
        truth_rel_tol,
        truth_abs_tol,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// One Newton iteration drawn from the sweep, kept for conditioning
/// diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct CondRecord {
    pub n: usize,
    pub sigma_min: f64,
    pub j_norm: f64,
    pub step_norm: f64,
    pub rho_before: f64,
}

/// Everything the kinetics sweep produces.
#[derive(Debug)]
pub struct KineticsStudy {
    pub config: StudyConfig,
    pub rows: Vec<ConvergenceRow>,
    pub per_point_by_n: BTreeMap<usize, StudyMetrics>,
    pub cond_records: Vec<CondRecord>,
    /// Basis parameters in pick order.
    pub basis_params: Vec<f64>,
    /// Matching snapshots, same order.
    pub snapshots: Vec<Snapshot>,
    pub bound: LowerBoundReport,
    /// Same bound from a doubled quadrature, for stability reporting.
    pub bound_refined: LowerBoundReport,
    pub eval_s: Vec<f64>,
    pub truth: Vec<Trajectory>,
    pub total_f_evals: u64,
}

/// Stacks a trajectory into one `mp` vector with block `i` scaled by the
/// square-rooted quadrature weight, matching the basis stacking.
fn weighted_stack(traj: &Trajectory) -> DVector<f64> {
    let m = traj.grid().len();
    let p = traj.states().ncols();
    let w = traj.grid().weights();
    let mut out = DVector::zeros(m * p);
    for i in 0..m {
        for c in 0..p {
            out[i * p + c] = w[i] * traj.states()[(i, c)];
        }
    }
    out
}

fn uniform_draws(seed: u64, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| lo + (hi - lo) * rng.gen::<f64>())
        .collect()
}

/// Runs the kinetics convergence sweep described by `config`.
pub fn run_kinetics_study(config: &StudyConfig) -> Result<KineticsStudy> {
    config.validate()?;
    if config.study != StudyKind::Kinetics {
        return Err(Error::invalid(
            "configuration does not describe the kinetics study",
        ));
    }
    let EvalGridSpec::Scan {
        s_min,
        s_max,
        count,
    } = config.eval_grid
    else {
        return Err(Error::invalid(
            "the kinetics study needs a scan evaluation grid",
        ));
    };

    let model = KineticsModel;
    let grid = make_time_grid(T_RANGE.0, T_RANGE.1, 300, GridScheme::Uniform)?;
    let ds = (s_max - s_min) / count as f64;
    let dt = (T_RANGE.1 - T_RANGE.0) / grid.len() as f64;
    let eval_s: Vec<f64> = (1..=count)
        .map(|k| s_min + (s_max - s_min) * k as f64 / count as f64)
        .collect();
    let eval_pts: Vec<Vec<f64>> = eval_s.iter().map(|&s| vec![s]).collect();

    let truth: Vec<Trajectory> = eval_pts
        .par_iter()
        .map(|s| {
            integrate(
                &model,
                &X0,
                s,
                &grid,
                KINETICS_TRUTH_RTOL,
                KINETICS_TRUTH_ATOL,
            )
        })
        .collect::<Result<_>>()?;

    // Projection lower bound from a dedicated quadrature in s, stacked with
    // the same time weights the interpolator uses.
    let quad_samples = |nodes: usize| -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        let rule = crate::quad::gauss_legendre(nodes, s_min, s_max)?;
        let samples: Vec<DVector<f64>> = rule
            .par_iter()
            .map(|(node, _)| {
                integrate(
                    &model,
                    &X0,
                    &[*node],
                    &grid,
                    KINETICS_TRUTH_RTOL,
                    KINETICS_TRUTH_ATOL,
                )
                .map(|tr| weighted_stack(&tr))
            })
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = rule.iter().map(|(_, w)| *w).collect();
        Ok((samples, weights))
    };
    let (gl_samples, gl_weights) = quad_samples(BOUND_QUAD_NODES)?;
    let bound = covariance_lower_bound(&gl_samples, &gl_weights)?;
    let bound_refined = {
        let (samples, weights) = quad_samples(2 * BOUND_QUAD_NODES)?;
        covariance_lower_bound(&samples, &weights)?
    };

    // Seed snapshots: range endpoints for greedy, the pre-drawn pool for
    // random.
    let mut basis_params: Vec<f64>;
    let mut active: Vec<Snapshot> = Vec::new();
    let mut random_pool: Vec<Snapshot> = Vec::new();
    match config.basis {
        BasisStrategy::Greedy => {
            basis_params = vec![s_min, s_max];
            for &s in &basis_params {
                let traj = integrate(
                    &model,
                    &X0,
                    &[s],
                    &grid,
                    KINETICS_TRUTH_RTOL,
                    KINETICS_TRUTH_ATOL,
                )?;
                active.push(snapshot_from_trajectory(&model, &traj)?);
            }
        }
        BasisStrategy::Random { seed, count } => {
            basis_params = uniform_draws(seed, count, s_min, s_max);
            random_pool = basis_params
                .par_iter()
                .map(|&s| {
                    integrate(
                        &model,
                        &X0,
                        &[s],
                        &grid,
                        KINETICS_TRUTH_RTOL,
                        KINETICS_TRUTH_ATOL,
                    )
                    .and_then(|tr| snapshot_from_trajectory(&model, &tr))
                })
                .collect::<Result<_>>()?;
            active.extend(random_pool.iter().take(2).cloned());
        }
    }

    let capture: BTreeSet<usize> = PER_POINT_CAPTURE
        .iter()
        .copied()
        .filter(|n| *n <= config.n_bases)
        .collect();
    let counter = EvalCounter::new();
    let mut rows = Vec::new();
    let mut cond_records = Vec::new();
    let mut per_point_by_n = BTreeMap::new();

    // Each enrichment step seeds every query with its previous solution
    // (padded with a zero for the new column), so per-point residuals are
    // nonincreasing in the basis size by construction.
    let mut warm: Vec<Option<DVector<f64>>> = Vec::new();

    loop {
        let basis = assemble_basis(active.clone())?;
        let n = basis.len();
        let opts = config.newton_options(basis.stacked_f().nrows());
        let metrics = study_metrics_warm(
            &basis, &model, &eval_pts, &truth, ds, dt, &opts, &counter, &warm,
        )?;
        let best_linear = best_linear_error(basis.stacked_x(), &gl_samples, &gl_weights)?;
        rows.push(ConvergenceRow {
            n,
            e: metrics.e,
            r: metrics.r,
            bound: bound.bound_for(n),
            avg_iters: metrics.avg_iters(),
            best_linear,
        });
        for pp in &metrics.per_point {
            for rec in &pp.records {
                cond_records.push(CondRecord {
                    n,
                    sigma_min: rec.sigma_min,
                    j_norm: rec.j_norm,
                    step_norm: rec.step_norm,
                    rho_before: rec.rho_before,
                });
            }
        }
        let keep = capture.contains(&n);
        let scores: Vec<f64> = metrics
            .per_point
            .iter()
            .map(|p| if p.ok { p.rho_star } else { f64::MAX })
            .collect();
        warm = metrics
            .per_point
            .iter()
            .map(|p| {
                p.a.as_ref().map(|a| {
                    let mut w = DVector::zeros(n + 1);
                    w.rows_mut(0, n).copy_from(a);
                    w
                })
            })
            .collect();
        if keep {
            per_point_by_n.insert(n, metrics);
        }
        if n >= config.n_bases {
            break;
        }
        match config.basis {
            BasisStrategy::Greedy => {
                let (idx, _) = pick_max(&scores)?;
                basis_params.push(eval_s[idx]);
                active.push(snapshot_from_trajectory(&model, &truth[idx])?);
            }
            BasisStrategy::Random { .. } => {
                active.push(random_pool[n].clone());
            }
        }
    }

    Ok(KineticsStudy {
        config: config.clone(),
        rows,
        per_point_by_n,
        cond_records,
        basis_params,
        snapshots: active,
        bound,
        bound_refined,
        eval_s,
        truth,
        total_f_evals: counter.count(),
    })
}

/// Writes the kinetics sweep artifacts: `convergence.csv`,
/// `perpoint_n{N}.csv`, `bound_eigs.csv`, `basis_params.csv`, and the run
/// manifest.
pub fn write_kinetics_outputs(study: &KineticsStudy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_convergence_csv(&dir.join("convergence.csv"), &study.rows)?;
    write_selected_per_point(dir, &study.per_point_by_n)?;

    let mut buf = String::from("index,theta\n");
    for (i, th) in study.bound.eigenvalues.iter().enumerate() {
        buf.push_str(&format!("{},{:.16e}\n", i + 1, th));
    }
    write_file(&dir.join("bound_eigs.csv"), &buf)?;

    let mut buf = String::from("order,s\n");
    for (i, s) in study.basis_params.iter().enumerate() {
        buf.push_str(&format!("{},{:.16e}\n", i + 1, s));
    }
    write_file(&dir.join("basis_params.csv"), &buf)?;

    let mut seeds = BTreeMap::new();
    if let BasisStrategy::Random { seed, .. } = study.config.basis {
        seeds.insert("basis", seed);
    }
    write_manifest(
        dir,
        &study.config,
        seeds,
        KINETICS_TRUTH_RTOL,
        KINETICS_TRUTH_ATOL,
    )
}

/// One held-out parameter draw of the heat cross-validation.
#[derive(Debug, Clone)]
pub struct CrossValRow {
    /// FNV-1a hash of the parameter bytes, printed in place of the full
    /// 11-vector.
    pub param_hash: String,
    pub q_true: f64,
    pub q_full: f64,
    pub q_windowed: f64,
    pub err_full: f64,
    pub err_win: f64,
    pub fevals_full: u64,
    pub fevals_win: u64,
}

/// Everything the heat cross-validation produces.
#[derive(Debug)]
pub struct HeatStudy {
    pub config: StudyConfig,
    pub rows: Vec<CrossValRow>,
    pub mean_err_full: f64,
    pub mean_err_win: f64,
    pub total_fevals_full: u64,
    pub total_fevals_win: u64,
    pub basis_params: Vec<Vec<f64>>,
    pub window: usize,
}

/// 64-bit FNV-1a over the little-endian parameter bytes.
pub fn param_hash(s: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in s {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Runs the heat cross-validation described by `config`.
pub fn run_heat_study(config: &StudyConfig) -> Result<HeatStudy> {
    config.validate()?;
    if config.study != StudyKind::Heat {
        return Err(Error::invalid(
            "configuration does not describe the heat study",
        ));
    }
    let BasisStrategy::Random {
        seed: basis_seed,
        count: n_basis,
    } = config.basis
    else {
        return Err(Error::invalid(
            "the heat study needs a random basis strategy",
        ));
    };
    let EvalGridSpec::Draws {
        seed: cv_seed,
        count: n_cv,
    } = config.eval_grid
    else {
        return Err(Error::invalid(
            "the heat study needs a draw evaluation grid",
        ));
    };

    let kl = KlBasis::standard(DEFAULT_TRUNCATION)?;
    let model = HeatModel::study(kl);
    let d = crate::model::ModelSystem::param_dim(&model);
    let grid = TimeGrid::from_parts(vec![DEFAULT_EVAL_TIME], vec![1.0])?;
    let qoi = QoIConfig::default();

    let mut rng = NormalSampler::seed_from_u64(basis_seed);
    let basis_params: Vec<Vec<f64>> = (0..n_basis).map(|_| rng.standard_normal_vec(d)).collect();
    let snaps: Vec<Snapshot> = basis_params
        .par_iter()
        .map(|s| {
            solve_heat(&model, s, &grid, HEAT_TRUTH_RTOL, HEAT_TRUTH_ATOL)
                .and_then(|tr| snapshot_from_trajectory(&model, &tr))
        })
        .collect::<Result<_>>()?;
    let basis = assemble_basis(snaps)?;

    let mut cv_rng = NormalSampler::seed_from_u64(cv_seed);
    let cv_params: Vec<Vec<f64>> = (0..n_cv).map(|_| cv_rng.standard_normal_vec(d)).collect();

    let window = if config.window == 0 {
        basis.len()
    } else {
        config.window
    };
    let opts = config.newton_options(basis.stacked_f().nrows());

    let rows: Vec<CrossValRow> = cv_params
        .par_iter()
        .map(|s| -> Result<CrossValRow> {
            let truth = solve_heat(&model, s, &grid, HEAT_TRUTH_RTOL, HEAT_TRUTH_ATOL)?;
            let q_true = qoi_fraction(&truth.state(0), model.domain(), &qoi);

            let counter_full = EvalCounter::new();
            let full = newton_solve(&basis, s, &model, &counter_full, &opts)?;
            let state_full: Vec<f64> = full.final_state.row(0).iter().copied().collect();
            let q_full = qoi_fraction(&state_full, model.domain(), &qoi);

            let (win_basis, _) = select_window(&basis, s, window)?;
            let counter_win = EvalCounter::new();
            let win = newton_solve(&win_basis, s, &model, &counter_win, &opts)?;
            let state_win: Vec<f64> = win.final_state.row(0).iter().copied().collect();
            let q_windowed = qoi_fraction(&state_win, model.domain(), &qoi);

            Ok(CrossValRow {
                param_hash: param_hash(s),
                q_true,
                q_full,
                q_windowed,
                err_full: (q_full - q_true).abs(),
                err_win: (q_windowed - q_true).abs(),
                fevals_full: counter_full.count(),
                fevals_win: counter_win.count(),
            })
        })
        .collect::<Result<_>>()?;

    let nf = rows.len() as f64;
    Ok(HeatStudy {
        config: config.clone(),
        mean_err_full: rows.iter().map(|r| r.err_full).sum::<f64>() / nf,
        mean_err_win: rows.iter().map(|r| r.err_win).sum::<f64>() / nf,
        total_fevals_full: rows.iter().map(|r| r.fevals_full).sum(),
        total_fevals_win: rows.iter().map(|r| r.fevals_win).sum(),
        rows,
        basis_params,
        window,
    })
}

/// Writes the heat cross-validation artifacts: `crossval.csv` and the run
/// manifest.
pub fn write_heat_outputs(study: &HeatStudy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf =
        String::from("s_hash,Q_true,Q_full,Q_windowed,err_full,err_win,fevals_full,fevals_win\n");
    for r in &study.rows {
        buf.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.param_hash,
            r.q_true,
            r.q_full,
            r.q_windowed,
            r.err_full,
            r.err_win,
            r.fevals_full,
            r.fevals_win
        ));
    }
    write_file(&dir.join("crossval.csv"), &buf)?;

    let mut seeds = BTreeMap::new();
    if let BasisStrategy::Random { seed, .. } = study.config.basis {
        seeds.insert("basis", seed);
    }
    if let EvalGridSpec::Draws { seed, .. } = study.config.eval_grid {
        seeds.insert("crossval", seed);
    }
    write_manifest(dir, &study.config, seeds, HEAT_TRUTH_RTOL, HEAT_TRUTH_ATOL)
}
