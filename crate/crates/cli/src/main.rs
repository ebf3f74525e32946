//! Command-line driver: snapshot stores, one-off interpolation queries, the
//! two benchmark studies, and the conductivity-mode export.
//!
//! Exit codes: 0 success, 1 numerical failure (integration, evaluation, or
//! solver breakdown), 2 usage or I/O problems (bad flags, malformed stores
//! and configs, filesystem errors).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use resmin::basis::{assemble_basis, select_window, snapshot_from_trajectory, BasisSet, Snapshot};
use resmin::cls::{TruncationRule, DEFAULT_TAU_SCALE};
use resmin::conductivity::{write_eigs_csv, write_modes_csv, KlBasis, DEFAULT_TRUNCATION};
use resmin::error::{Error, Result};
use resmin::heat::{solve_heat, HeatModel, DEFAULT_EVAL_TIME};
use resmin::interp::{
    evaluate_state, newton_solve, Damping, NewtonOptions, DEFAULT_FD_EPS, DEFAULT_MAX_ITERS,
};
use resmin::kinetics::{KineticsModel, T_RANGE, X0};
use resmin::model::{make_time_grid, EvalCounter, GridScheme, ModelSystem, TimeGrid};
use resmin::ode::integrate_with_stats;
use resmin::rng::NormalSampler;
use resmin::store::{load_store, save_store};
use resmin::study::{
    param_hash, run_heat_study, run_kinetics_study, write_heat_outputs, write_kinetics_outputs,
    BasisStrategy, EvalGridSpec, StudyConfig, HEAT_TRUTH_ATOL, HEAT_TRUTH_RTOL,
    KINETICS_TRUTH_ATOL, KINETICS_TRUTH_RTOL,
};

#[derive(Parser)]
#[command(
    name = "resmin",
    version,
    about = "Residual-minimizing model interpolation"
)]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate trajectories and write them into a snapshot store.
    Snapshot(SnapshotArgs),
    /// Interpolate one query parameter from an existing store.
    Interp(InterpArgs),
    /// Greedy basis-enrichment sweep on the kinetics benchmark.
    StudyKinetics(StudyArgs),
    /// Windowed-vs-full cross-validation on the heat benchmark.
    StudyHeat(StudyArgs),
    /// Export the conductivity Karhunen-Loeve modes and eigenvalues as CSV.
    KlExport(KlArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Bench {
    Kinetics,
    Heat,
}

#[derive(Args)]
struct SnapshotArgs {
    /// Store directory to create or overwrite.
    #[arg(long)]
    store: PathBuf,
    /// Benchmark the snapshots belong to.
    #[arg(long, value_enum, default_value_t = Bench::Kinetics)]
    study: Bench,
    /// Kinetics rate parameter; repeat for one snapshot each.
    #[arg(long = "param", value_name = "S")]
    params: Vec<f64>,
    /// Number of field-coefficient draws (heat benchmark).
    #[arg(long)]
    n_bases: Option<usize>,
    /// Draw seed (heat benchmark).
    #[arg(long)]
    seed: Option<u64>,
    /// Time-grid size of kinetics trajectories.
    #[arg(long, default_value_t = 300)]
    grid_points: usize,
}

#[derive(Args)]
struct InterpArgs {
    /// Snapshot store directory.
    #[arg(long)]
    store: PathBuf,
    /// Query parameter component; repeat for vector-valued parameters.
    #[arg(long = "param", value_name = "S", required = true)]
    params: Vec<f64>,
    /// Nearest-neighbor window size (0 uses the full basis).
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Relative spectral-truncation scale of the least-squares solves.
    #[arg(long, default_value_t = DEFAULT_TAU_SCALE)]
    trunc_tau: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_newton: usize,
    /// Finite-difference increment of the Jacobian action.
    #[arg(long, default_value_t = DEFAULT_FD_EPS)]
    fd_eps: f64,
    /// Grid index whose reconstructed state is printed; repeatable.
    #[arg(long = "at", value_name = "INDEX")]
    at: Vec<usize>,
    /// Write the coefficient table to this CSV file instead of stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// JSON study configuration; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_bases: Option<usize>,
    /// Nearest-neighbor window size (0 uses the full basis).
    #[arg(long)]
    window: Option<usize>,
    /// Relative spectral-truncation scale of the least-squares solves.
    #[arg(long)]
    trunc_tau: Option<f64>,
    #[arg(long)]
    max_newton: Option<usize>,
    /// Finite-difference increment of the Jacobian action.
    #[arg(long)]
    fd_eps: Option<f64>,
    /// Basis draw seed (random basis strategies only).
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out draw count of the cross-validation.
    #[arg(long)]
    cv_draws: Option<usize>,
    /// Output directory (required unless the config file names one).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KlArgs {
    /// Output directory for modes.csv and eigs.csv.
    #[arg(long)]
    out: PathBuf,
    /// Retained modes.
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    modes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::LoadFailure { .. } | Error::Io { .. } => 2,
        Error::IntegrationFailure { .. }
        | Error::EvaluationFailure { .. }
        | Error::NumericalFailure(_) => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Snapshot(args) => cmd_snapshot(&args),
        Command::Interp(args) => cmd_interp(&args),
        Command::StudyKinetics(args) => cmd_study_kinetics(&args),
        Command::StudyHeat(args) => cmd_study_heat(&args),
        Command::KlExport(args) => cmd_kl_export(&args),
    }
}

fn cmd_snapshot(args: &SnapshotArgs) -> Result<()> {
    let snaps = match args.study {
        Bench::Kinetics => {
            if args.params.is_empty() {
                return Err(Error::InvalidArgument(
                    "at least one --param is required for kinetics snapshots".into(),
                ));
            }
            if args.n_bases.is_some() || args.seed.is_some() {
                return Err(Error::InvalidArgument(
                    "--n-bases/--seed apply to the heat benchmark".into(),
                ));
            }
            let model = KineticsModel;
            let grid = make_time_grid(T_RANGE.0, T_RANGE.1, args.grid_points, GridScheme::Uniform)?;
            let mut snaps = Vec::with_capacity(args.params.len());
            let mut total_evals = 0u64;
            for &s in &args.params {
                let (traj, stats) = integrate_with_stats(
                    &model,
                    &X0,
                    &[s],
                    &grid,
                    KINETICS_TRUTH_RTOL,
                    KINETICS_TRUTH_ATOL,
                )?;
                total_evals += stats.rhs_evals;
                println!(
                    "s = {s}: {} accepted steps, {} rhs evals",
                    stats.steps_accepted, stats.rhs_evals
                );
                snaps.push(snapshot_from_trajectory(&model, &traj)?);
            }
            println!("total rhs evals: {total_evals}");
            snaps
        }
        Bench::Heat => {
            if !args.params.is_empty() {
                return Err(Error::InvalidArgument(
                    "--param applies to the kinetics benchmark; heat snapshots are drawn".into(),
                ));
            }
            let count = args.n_bases.unwrap_or(20);
            if count == 0 {
                return Err(Error::InvalidArgument(
                    "--n-bases must be at least 1".into(),
                ));
            }
            let seed = args.seed.unwrap_or(2024);
            let kl = KlBasis::standard(DEFAULT_TRUNCATION)?;
            let model = HeatModel::study(kl);
            let d = ModelSystem::param_dim(&model);
            let grid = TimeGrid::from_parts(vec![DEFAULT_EVAL_TIME], vec![1.0])?;
            let mut rng = NormalSampler::seed_from_u64(seed);
            let mut snaps = Vec::with_capacity(count);
            for k in 0..count {
                let s = rng.standard_normal_vec(d);
                let traj = solve_heat(&model, &s, &grid, HEAT_TRUTH_RTOL, HEAT_TRUTH_ATOL)?;
                println!("draw {k}: s_hash = {}", param_hash(&s));
                snaps.push(snapshot_from_trajectory(&model, &traj)?);
            }
            snaps
        }
    };
    let manifest = save_store(&args.store, &snaps)?;
    println!("wrote {} snapshots to {}", snaps.len(), manifest.display());
    Ok(())
}

/// Picks the benchmark model matching the store's parameter dimension.
fn model_for(basis: &BasisSet) -> Result<Box<dyn ModelSystem>> {
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

fn cmd_interp(args: &InterpArgs) -> Result<()> {
    let snaps = load_store(&args.store)?;
    let basis = assemble_basis(snaps)?;
    let model = model_for(&basis)?;
    let n = basis.len();
    println!(
        "store: {} ({} snapshots, state dim {}, {} grid points)",
        args.store.display(),
        n,
        basis.state_dim(),
        basis.grid().len()
    );

    // Solve on the window (full basis when 0), then scatter the coefficients
    // back into full-length slots.
    let (active, slots): (BasisSet, Vec<usize>) = if args.window == 0 || args.window >= n {
        (basis.clone(), (0..n).collect())
    } else {
        select_window(&basis, &args.params, args.window)?
    };
    let mut opts = NewtonOptions::for_stack(active.stacked_f().nrows());
    opts.max_iters = args.max_newton;
    opts.fd_eps = args.fd_eps;
    opts.trunc = TruncationRule::Relative(args.trunc_tau);
    opts.damping = Damping::Halving;

    let counter = EvalCounter::new();
    let res = newton_solve(&active, &args.params, model.as_ref(), &counter, &opts)?;
    let mut full_a = DVector::zeros(n);
    for (k, &j) in slots.iter().enumerate() {
        full_a[j] = res.a[k];
    }

    println!("query: s = {:?}", args.params);
    println!(
        "rho_initial = {:.6e}, rho_star = {:.6e}, iters = {}, converged = {}, f_evals = {}",
        res.rho_initial, res.rho_star, res.iters, res.converged, res.f_evals
    );
    if let Some(max_cond) = res
        .per_iter
        .iter()
        .map(|r| r.cond_full)
        .max_by(f64::total_cmp)
    {
        println!("max condition of the Newton systems: {max_cond:.6e}");
    }

    let scalar_param = basis.snapshots()[0].param.len() == 1;
    let label = |snap: &Snapshot| -> String {
        if scalar_param {
            format!("{:.16e}", snap.param[0])
        } else {
            param_hash(&snap.param)
        }
    };
    let header = if scalar_param {
        "slot,s,coefficient"
    } else {
        "slot,s_hash,coefficient"
    };
    println!("{header}");
    let mut csv = String::from(header);
    csv.push('\n');
    for j in 0..n {
        let line = format!("{},{},{:.16e}", j, label(&basis.snapshots()[j]), full_a[j]);
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    if let Some(path) = &args.out {
        fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        println!("wrote {}", path.display());
    }

    for &i in &args.at {
        let x = evaluate_state(&basis, &full_a, i)?;
        let t = basis.grid().points()[i];
        let fields: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        println!("state[{i}] (t = {t}): {}", fields.join(", "));
    }
    Ok(())
}

/// Applies the config file (when given) and flag overrides on top of the
/// benchmark's default configuration.
fn resolve_config(args: &StudyArgs, default: StudyConfig) -> Result<StudyConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let body = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<StudyConfig>(&body).map_err(|e| Error::LoadFailure {
                file: path.clone(),
                field: format!("config parse: {e}"),
            })?
        }
        None => default,
    };
    if let Some(v) = args.n_bases {
        cfg.n_bases = v;
        if let BasisStrategy::Random { count, .. } = &mut cfg.basis {
            *count = v;
        }
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.trunc_tau {
        cfg.trunc_tau = v;
    }
    if let Some(v) = args.max_newton {
        cfg.max_newton = v;
    }
    if let Some(v) = args.fd_eps {
        cfg.fd_eps = v;
    }
    if let Some(seed) = args.seed {
        match &mut cfg.basis {
            BasisStrategy::Random { seed: s, .. } => *s = seed,
            BasisStrategy::Greedy => {
                return Err(Error::InvalidArgument(
                    "--seed needs a random basis strategy".into(),
                ))
            }
        }
    }
    if let Some(count) = args.cv_draws {
        match &mut cfg.eval_grid {
            EvalGridSpec::Draws { count: c, .. } => *c = count,
            EvalGridSpec::Scan { .. } => {
                return Err(Error::InvalidArgument(
                    "--cv-draws applies to draw-based evaluation grids".into(),
                ))
            }
        }
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if cfg.out_dir.as_os_str().is_empty() {
        return Err(Error::InvalidArgument(
            "--out (or an out_dir in --config) is required".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_study_kinetics(args: &StudyArgs) -> Result<()> {
    let cfg = resolve_config(args, StudyConfig::kinetics_default(""))?;
    let study = run_kinetics_study(&cfg)?;
    write_kinetics_outputs(&study, &cfg.out_dir)?;
    let first = study.rows.first().expect("sweep produced rows");
    let last = study.rows.last().expect("sweep produced rows");
    println!(
        "kinetics sweep: n = {}..{}, R = {:.3e} -> {:.3e}, {} forcing evals",
        first.n, last.n, first.r, last.r, study.total_f_evals
    );
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_study_heat(args: &StudyArgs) -> Result<()> {
    let cfg = resolve_config(args, StudyConfig::heat_default(""))?;
    let study = run_heat_study(&cfg)?;
    write_heat_outputs(&study, &cfg.out_dir)?;
    println!(
        "heat cross-validation: {} draws, window {}, mean |Q - Q_true| full {:.3e} / windowed {:.3e}",
        study.rows.len(),
        study.window,
        study.mean_err_full,
        study.mean_err_win
    );
    println!(
        "forcing evals: full {} vs windowed {}",
        study.total_fevals_full, study.total_fevals_win
    );
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_kl_export(args: &KlArgs) -> Result<()> {
    let kl = KlBasis::standard(args.modes)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_modes_csv(&args.out.join("modes.csv"), &kl)?;
    write_eigs_csv(&args.out.join("eigs.csv"), &kl)?;
    println!(
        "{} modes over {} nodes: total variance {:.6e}, captured fraction {:.6}",
        kl.truncation(),
        kl.nodes(),
        kl.total_variance(),
        kl.captured_fraction()
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}
