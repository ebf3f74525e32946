//! End-to-end runs of the `resmin` binary: store round trips, interpolation
//! queries, tiny study configurations, and the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resmin::study::{EvalGridSpec, StudyConfig};

fn resmin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resmin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(out.status.code(), Some(want), "stderr: {}", stderr(out));
}

/// Pulls `name = <float>` out of the diagnostics line.
fn parse_metric(text: &str, name: &str) -> f64 {
    let tag = format!("{name} = ");
    let start = text
        .find(&tag)
        .unwrap_or_else(|| panic!("no {name} in:\n{text}"))
        + tag.len();
    text[start..]
        .split(|c: char| c == ',' || c.is_whitespace())
        .next()
        .unwrap()
        .parse()
        .expect("metric parses")
}

/// Coefficient column of the printed table, one entry per slot.
fn parse_coefficients(text: &str) -> Vec<f64> {
    let mut rows = Vec::new();
    let mut in_table = false;
    for line in text.lines() {
        if line.starts_with("slot,") {
            in_table = true;
            continue;
        }
        if !in_table {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields[0].parse::<usize>().is_err() {
            break;
        }
        rows.push(fields[2].parse::<f64>().expect("coefficient parses"));
    }
    assert!(!rows.is_empty(), "no coefficient table in:\n{text}");
    rows
}

#[test]
fn snapshot_then_interp_reproduces_a_stored_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = resmin(&[
        "snapshot",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.3",
        "--param",
        "0.7",
        "--param",
        "1.1",
        "--grid-points",
        "40",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("rhs evals"), "eval counts printed");
    assert!(store.join("manifest.json").is_file());

    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.7",
        "--at",
        "0",
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("converged = true"), "{text}");
    assert!(parse_metric(&text, "rho_star") < 1e-10);
    let a = parse_coefficients(&text);
    assert_eq!(a.len(), 3);
    assert!(
        (a[1] - 1.0).abs() < 1e-6,
        "stored slot carries the weight: {a:?}"
    );
    assert!(a[0].abs() < 1e-6 && a[2].abs() < 1e-6, "{a:?}");
    // --at 0 echoes the initial condition.
    assert!(text.contains("state[0]"), "{text}");
}

#[test]
fn window_flag_limits_nonzero_slots() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let mut args = vec![
        "snapshot",
        "--store",
        store.to_str().unwrap(),
        "--grid-points",
        "30",
    ];
    let params = ["0.1", "0.25", "0.4", "0.55", "0.7", "0.85", "1.0", "1.15"];
    for p in &params {
        args.push("--param");
        args.push(p);
    }
    assert_code(&resmin(&args), 0);

    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.6",
        "--window",
        "3",
    ]);
    assert_code(&out, 0);
    let a = parse_coefficients(&stdout(&out));
    assert_eq!(a.len(), params.len());
    let nonzero = a.iter().filter(|v| **v != 0.0).count();
    assert_eq!(nonzero, 3, "{a:?}");
    // The window sits on the three parameters nearest 0.6 (0.4, 0.55, 0.7).
    for (j, v) in a.iter().enumerate() {
        if (2..=4).contains(&j) {
            assert!(*v != 0.0, "{a:?}");
        } else {
            assert_eq!(*v, 0.0, "{a:?}");
        }
    }
}

#[test]
fn snapshot_without_parameters_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = resmin(&[
        "snapshot",
        "--store",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("--param"), "{}", stderr(&out));
}

#[test]
fn broken_stores_exit_2_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");

    // Missing directory: the manifest is named.
    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.5",
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("manifest.json"), "{}", stderr(&out));

    // Valid store with one data file removed: that file is named.
    assert_code(
        &resmin(&[
            "snapshot",
            "--store",
            store.to_str().unwrap(),
            "--param",
            "0.3",
            "--param",
            "0.9",
            "--grid-points",
            "20",
        ]),
        0,
    );
    fs::remove_file(store.join("snap_001_state.csv")).unwrap();
    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.5",
    ]);
    assert_code(&out, 2);
    assert!(
        stderr(&out).contains("snap_001_state.csv"),
        "{}",
        stderr(&out)
    );

    // Corrupt manifest JSON.
    fs::write(store.join("manifest.json"), "{\"version\": 1").unwrap();
    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.5",
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("manifest.json"), "{}", stderr(&out));
}

#[test]
fn interp_rejects_wrong_parameter_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    assert_code(
        &resmin(&[
            "snapshot",
            "--store",
            store.to_str().unwrap(),
            "--param",
            "0.4",
            "--grid-points",
            "20",
        ]),
        0,
    );
    let out = resmin(&[
        "interp",
        "--store",
        store.to_str().unwrap(),
        "--param",
        "0.5",
        "--param",
        "0.7",
    ]);
    assert_code(&out, 2);
}

fn write_tiny_kinetics_config(path: &Path, out_dir: &Path) {
    let mut cfg = StudyConfig::kinetics_default(out_dir);
    cfg.n_bases = 4;
    cfg.eval_grid = EvalGridSpec::Scan {
        s_min: 0.005,
        s_max: 1.2,
        count: 40,
    };
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn kinetics_study_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let out_dir = dir.path().join("results");
    write_tiny_kinetics_config(&cfg_path, &out_dir);

    let run = || {
        let out = resmin(&[
            "study-kinetics",
            "--config",
            cfg_path.to_str().unwrap(),
            "--jobs",
            "1",
        ]);
        assert_code(&out, 0);
        let conv = fs::read_to_string(out_dir.join("convergence.csv")).unwrap();
        let basis = fs::read_to_string(out_dir.join("basis_params.csv")).unwrap();
        let eigs = fs::read_to_string(out_dir.join("bound_eigs.csv")).unwrap();
        let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
        (conv, basis, eigs, manifest)
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "rerun must be byte-identical");

    let (conv, _, _, manifest) = first;
    let mut lines = conv.lines();
    assert_eq!(lines.next().unwrap(), "n_bases,E,R,bound,avg_newton_iters");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3, "n = 2, 3, 4");
    for w in rows.windows(2) {
        assert!(w[1][2] <= w[0][2] + 1e-10, "R nonincreasing: {conv}");
        assert!(
            w[1][3] <= w[0][3] * (1.0 + 1e-12),
            "bound nonincreasing: {conv}"
        );
    }
    // Manifest echoes the resolved config and seeds.
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["config"]["n_bases"], 4);
    assert_eq!(v["config"]["study"], "kinetics");
    assert!(v["code_version"].is_string());
}

#[test]
fn heat_study_full_window_matches_full_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("m0");
    let out = resmin(&[
        "study-heat",
        "--n-bases",
        "2",
        "--cv-draws",
        "2",
        "--window",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_code(&out, 0);
    let body = fs::read_to_string(out_dir.join("crossval.csv")).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next().unwrap(),
        "s_hash,Q_true,Q_full,Q_windowed,err_full,err_win,fevals_full,fevals_win"
    );
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[3], "windowed Q equals full Q: {line}");
        assert_eq!(f[4], f[5], "windowed error equals full error: {line}");
        assert_eq!(f[6], f[7], "same work when the window is the basis: {line}");
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn heat_study_windowed_run_costs_less_rowwise() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("win");
    let out = resmin(&[
        "study-heat",
        "--n-bases",
        "6",
        "--cv-draws",
        "2",
        "--window",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_code(&out, 0);
    let body = fs::read_to_string(out_dir.join("crossval.csv")).unwrap();
    for line in body.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        for q in &f[1..4] {
            let q: f64 = q.parse().unwrap();
            assert!((0.0..=1.0).contains(&q), "Q in [0,1]: {line}");
        }
        let full: u64 = f[6].parse().unwrap();
        let win: u64 = f[7].parse().unwrap();
        assert!(win < full, "windowed solve must cost less: {line}");
    }
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["seeds"]["basis"], 2024);
    assert_eq!(v["seeds"]["crossval"], 2025);
}

#[test]
fn kl_export_writes_modes_and_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("kl");
    let out = resmin(&[
        "kl-export",
        "--out",
        out_dir.to_str().unwrap(),
        "--modes",
        "11",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("total variance"));

    let eigs = fs::read_to_string(out_dir.join("eigs.csv")).unwrap();
    assert!(eigs.starts_with("index,lambda\n"));
    assert_eq!(eigs.lines().count(), 12, "11 eigenvalues plus header");

    let modes = fs::read_to_string(out_dir.join("modes.csv")).unwrap();
    assert!(modes.starts_with("T,phi1,"));
    assert_eq!(modes.lines().count(), 601, "600 nodes plus header");
}

#[test]
fn study_without_output_directory_is_a_usage_error() {
    let out = resmin(&["study-kinetics"]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("--out"), "{}", stderr(&out));
}

#[test]
fn seed_flag_requires_a_random_basis() {
    let dir = tempfile::tempdir().unwrap();
    let out = resmin(&[
        "study-kinetics",
        "--seed",
        "7",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("random"), "{}", stderr(&out));
}
