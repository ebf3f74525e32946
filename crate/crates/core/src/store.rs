//! On-disk snapshot store.
//!
//! A store directory holds `manifest.json` plus two CSV files per snapshot
//! (states and forcing histories). The manifest records the shared time grid
//! and, per snapshot, its id, parameter vector, and the two file names:
//!
//! ```json
//! {
//!   "version": 1,
//!   "state_dim": 3,
//!   "param_dim": 1,
//!   "grid": { "t_points": [...], "sq_weights": [...] },
//!   "snapshots": [
//!     { "id": "snap_000", "s": [0.005],
//!       "state_file": "snap_000_state.csv",
//!       "forcing_file": "snap_000_forcing.csv" }
//!   ]
//! }
//! ```
//!
//! CSV files carry the header `t,x1,...,xp` and one row per grid point with
//! 17 significant digits, so a save/load round trip is bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::Snapshot;
use crate::error::{Error, Result};
use crate::model::TimeGrid;

pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    state_dim: usize,
    param_dim: usize,
    grid: GridSpec,
    snapshots: Vec<SnapshotEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSpec {
    t_points: Vec<f64>,
    sq_weights: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    id: String,
    s: Vec<f64>,
    state_file: String,
    forcing_file: String,
}

/// Writes `snapshots` (all on one grid) into `dir`, replacing any existing
/// manifest. Returns the manifest path.
pub fn save_store(dir: &Path, snapshots: &[Snapshot]) -> Result<PathBuf> {
    if snapshots.is_empty() {
        return Err(Error::invalid("refusing to save an empty snapshot store"));
    }
    let grid = &snapshots[0].grid;
    let p = snapshots[0].states.ncols();
    let d = snapshots[0].param.len();
    for (j, s) in snapshots.iter().enumerate() {
        if &s.grid != grid || s.states.ncols() != p || s.param.len() != d {
            return Err(Error::invalid(format!(
                "snapshot {j} is inconsistent with the first"
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(snapshots.len());
    for (j, snap) in snapshots.iter().enumerate() {
        let id = format!("snap_{j:03}");
        let state_file = format!("{id}_state.csv");
        let forcing_file = format!("{id}_forcing.csv");
        write_history_csv(&dir.join(&state_file), grid, &snap.states)?;
        write_history_csv(&dir.join(&forcing_file), grid, &snap.forcing)?;
        entries.push(SnapshotEntry {
            id,
            s: snap.param.clone(),
            state_file,
            forcing_file,
        });
    }
    let manifest = Manifest {
        version: STORE_VERSION,
        state_dim: p,
        param_dim: d,
        grid: GridSpec {
            t_points: grid.points().to_vec(),
            sq_weights: grid.sq_weights().to_vec(),
        },
        snapshots: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::NumericalFailure(format!("manifest serialization failed: {e}")))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every snapshot listed in `dir/manifest.json`, validating shapes
/// against the manifest grid.
pub fn load_store(dir: &Path) -> Result<Vec<Snapshot>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let body = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&body)
        .map_err(|e| Error::load(&manifest_path, format!("manifest parse: {e}")))?;
    if manifest.version != STORE_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("version {} (expected {STORE_VERSION})", manifest.version),
        ));
    }
    let grid = TimeGrid::from_parts(manifest.grid.t_points, manifest.grid.sq_weights)
        .map_err(|e| Error::load(&manifest_path, format!("grid: {e}")))?;

    let mut out = Vec::with_capacity(manifest.snapshots.len());
    for entry in &manifest.snapshots {
        if entry.s.len() != manifest.param_dim {
            return Err(Error::load(
                &manifest_path,
                format!(
                    "snapshot {}: parameter length {} != param_dim",
                    entry.id,
                    entry.s.len()
                ),
            ));
        }
        let states = read_history_csv(&dir.join(&entry.state_file), &grid, manifest.state_dim)?;
        let forcing = read_history_csv(&dir.join(&entry.forcing_file), &grid, manifest.state_dim)?;
        out.push(Snapshot {
            param: entry.s.clone(),
            grid: grid.clone(),
            states,
            forcing,
        });
    }
    Ok(out)
}

fn write_history_csv(path: &Path, grid: &TimeGrid, rows: &DMatrix<f64>) -> Result<()> {
    let p = rows.ncols();
    let mut buf = String::with_capacity(32 * (p + 1) * (grid.len() + 1));
    buf.push('t');
    for c in 1..=p {
        buf.push_str(&format!(",x{c}"));
    }
    buf.push('\n');
    for i in 0..grid.len() {
        buf.push_str(&format!("{:.16e}", grid.points()[i]));
        for c in 0..p {
            buf.push_str(&format!(",{:.16e}", rows[(i, c)]));
        }
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_history_csv(path: &Path, grid: &TimeGrid, p: usize) -> Result<DMatrix<f64>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = body.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::load(path, "empty file"))?;
    let mut expected = String::from("t");
    for c in 1..=p {
        expected.push_str(&format!(",x{c}"));
    }
    if header.trim() != expected {
        return Err(Error::load(
            path,
            format!("header {header:?} (expected {expected:?})"),
        ));
    }
    let mut rows = DMatrix::zeros(grid.len(), p);
    let mut count = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if count >= grid.len() {
            return Err(Error::load(
                path,
                format!("more rows than the {} grid points", grid.len()),
            ));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p + 1 {
            return Err(Error::load(
                path,
                format!(
                    "row {}: {} fields (expected {})",
                    lineno + 2,
                    fields.len(),
                    p + 1
                ),
            ));
        }
        let parse = |f: &str, what: String| -> Result<f64> {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::load(path, format!("{what}: unparseable value {f:?}")))
        };
        let t = parse(fields[0], format!("row {} time", lineno + 2))?;
        if (t - grid.points()[count]).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::load(
                path,
                format!(
                    "row {} time {t} does not match grid point {}",
                    lineno + 2,
                    grid.points()[count]
                ),
            ));
        }
        for c in 0..p {
            rows[(count, c)] = parse(
                fields[c + 1],
                format!("row {} column x{}", lineno + 2, c + 1),
            )?;
        }
        count += 1;
    }
    if count != grid.len() {
        return Err(Error::load(
            path,
            format!("{count} rows (expected {})", grid.len()),
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_time_grid, GridScheme};

    fn sample_snapshots() -> Vec<Snapshot> {
        let grid = make_time_grid(0.0, 1.0, 4, GridScheme::Uniform).unwrap();
        (0..3)
            .map(|j| {
                let f = 10f64.powi(-j) * std::f64::consts::PI;
                Snapshot {
                    param: vec![0.1 * (j as f64 + 1.0)],
                    grid: grid.clone(),
                    states: DMatrix::from_fn(4, 2, |i, c| f * (i as f64 + 0.37 * c as f64 + 1.0)),
                    forcing: DMatrix::from_fn(4, 2, |i, c| -f / (i as f64 + c as f64 + 1.0)),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let snaps = sample_snapshots();
        save_store(dir.path(), &snaps).unwrap();
        let loaded = load_store(dir.path()).unwrap();
        assert_eq!(loaded.len(), snaps.len());
        for (a, b) in snaps.iter().zip(&loaded) {
            assert_eq!(a.param, b.param);
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.states, b.states);
            assert_eq!(a.forcing, b.forcing);
        }
    }

    #[test]
    fn csv_header_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &sample_snapshots()).unwrap();
        let body = fs::read_to_string(dir.path().join("snap_000_state.csv")).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2");
        let first = lines.next().unwrap();
        // 17 significant digits: mantissa d.16-digits in scientific notation.
        for field in first.split(',') {
            let mantissa = field.split('e').next().unwrap();
            let digits: usize = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
            assert_eq!(digits, 17, "field {field}");
        }
        assert_eq!(body.lines().count(), 5);
    }

    #[test]
    fn manifest_contents_match_schema() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &sample_snapshots()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap())
                .unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["state_dim"], 2);
        assert_eq!(v["param_dim"], 1);
        assert_eq!(v["grid"]["t_points"].as_array().unwrap().len(), 4);
        assert_eq!(v["grid"]["sq_weights"].as_array().unwrap().len(), 4);
        let snaps = v["snapshots"].as_array().unwrap();
        assert_eq!(snaps.len(), 3);
        assert_eq!(snaps[0]["id"], "snap_000");
        assert_eq!(snaps[0]["state_file"], "snap_000_state.csv");
        assert_eq!(snaps[0]["forcing_file"], "snap_000_forcing.csv");
        assert_eq!(snaps[1]["s"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn grid_mismatch_is_a_load_failure_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &sample_snapshots()).unwrap();
        // Truncate one data file by a row.
        let path = dir.path().join("snap_001_forcing.csv");
        let body = fs::read_to_string(&path).unwrap();
        let shorter: Vec<&str> = body.lines().take(4).collect();
        fs::write(&path, shorter.join("\n")).unwrap();
        let err = load_store(dir.path()).unwrap_err();
        match err {
            Error::LoadFailure { file, field } => {
                assert!(file.ends_with("snap_001_forcing.csv"));
                assert!(field.contains("3 rows"), "field = {field}");
            }
            other => panic!("expected LoadFailure, got {other}"),
        }
    }

    #[test]
    fn corrupt_value_and_header_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &sample_snapshots()).unwrap();

        let path = dir.path().join("snap_000_state.csv");
        let body = fs::read_to_string(&path).unwrap();
        fs::write(&path, body.replacen("x2", "y2", 1)).unwrap();
        assert!(matches!(
            load_store(dir.path()),
            Err(Error::LoadFailure { .. })
        ));

        fs::write(&path, body.replacen("e0,", "e0_oops,", 1)).unwrap();
        assert!(matches!(
            load_store(dir.path()),
            Err(Error::LoadFailure { .. })
        ));
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_store(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &sample_snapshots()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let body =
            fs::read_to_string(&path)
                .unwrap()
                .replacen("\"version\": 1", "\"version\": 9", 1);
        fs::write(&path, body).unwrap();
        let err = load_store(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }
}
