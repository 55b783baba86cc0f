//! CSV, gnuplot script and JSON emission.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::series::LinearInterp;

#[derive(Debug, Error)]
#[error("cannot write {}: {source}", path.display())]
pub struct OutputError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError {
        path: path.to_path_buf(),
        source,
    }
}

/// One named column sampled on its own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, grid: &[f64], values: &[f64]) -> Self {
        Self {
            name: name.into(),
            grid: grid.to_vec(),
            values: values.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitSummary {
    pub rows: usize,
    pub resampled: bool,
}

fn cell(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV with a header row and LF line endings.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), OutputError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    out.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        out.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    out.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> OutputError {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, format!("{other:?}")),
    };
    OutputError {
        path: path.to_path_buf(),
        source,
    }
}

/// Shared grid of the curves: the longest grid when every other grid is a
/// prefix of it, otherwise `None`.
fn common_grid(curves: &[Series]) -> Option<&[f64]> {
    let longest = curves.iter().map(|c| c.grid.as_slice()).max_by_key(|g| g.len())?;
    curves
        .iter()
        .all(|c| longest.starts_with(&c.grid))
        .then_some(longest)
}

/// Coarsest grid (largest mean spacing) clipped to the span covered by every curve.
fn coarsest_grid(curves: &[Series]) -> Vec<f64> {
    let start = curves.iter().filter_map(|c| c.grid.first()).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let end = curves.iter().filter_map(|c| c.grid.last()).fold(f64::INFINITY, |a, &b| a.min(b));
    let spacing = |g: &[f64]| if g.len() < 2 { f64::INFINITY } else { (g[g.len() - 1] - g[0]) / (g.len() - 1) as f64 };
    let coarse = curves
        .iter()
        .map(|c| c.grid.as_slice())
        .max_by(|a, b| spacing(a).total_cmp(&spacing(b)))
        .unwrap_or(&[]);
    coarse.iter().copied().filter(|t| *t >= start && *t <= end).collect()
}

/// Writes `curves` as columns `t, name₁, …` to `path` and a gnuplot script next to it.
///
/// Curves whose grids are prefixes of the longest one are written as is, with
/// empty cells once a curve ends. Any other misalignment resamples every curve
/// linearly onto the coarsest grid over the common span.
pub fn emit_series(curves: &[Series], path: &Path) -> Result<EmitSummary, OutputError> {
    let mut header = vec!["t".to_string()];
    header.extend(curves.iter().map(|c| c.name.clone()));

    let (rows, resampled) = match common_grid(curves) {
        Some(grid) => {
            let rows = grid
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let mut row = vec![cell(t)];
                    row.extend(curves.iter().map(|c| c.values.get(i).map_or(String::new(), |v| cell(*v))));
                    row
                })
                .collect::<Vec<_>>();
            (rows, false)
        }
        None if curves.is_empty() => (Vec::new(), false),
        None => {
            let grid = coarsest_grid(curves);
            log::warn!(
                "{}: curve grids are misaligned; resampled {} curves onto {} rows",
                path.display(),
                curves.len(),
                grid.len()
            );
            let interps: Vec<LinearInterp> = curves.iter().map(|c| LinearInterp::new(&c.grid, &c.values)).collect();
            let rows = grid
                .iter()
                .map(|&t| {
                    let mut row = vec![cell(t)];
                    row.extend(interps.iter().map(|f| cell(f.eval(t))));
                    row
                })
                .collect();
            (rows, true)
        }
    };
    write_csv(path, &header, &rows)?;
    write_plot_script(path, &header[1..])?;
    Ok(EmitSummary {
        rows: rows.len(),
        resampled,
    })
}

/// Gnuplot script plotting every column of `csv` against the first.
pub fn write_plot_script(csv: &Path, columns: &[String]) -> Result<PathBuf, OutputError> {
    let script = csv.with_extension("gp");
    let name = csv.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = csv.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut text = String::new();
    text.push_str("set datafile separator ','\n");
    text.push_str("set key autotitle columnhead\n");
    text.push_str("set xlabel 't'\n");
    text.push_str("set terminal pngcairo size 900,600\n");
    text.push_str(&format!("set output '{stem}.png'\n"));
    if columns.is_empty() {
        text.push_str("# no data columns\n");
    } else {
        let plots: Vec<String> = (0..columns.len())
            .map(|i| {
                let file = if i == 0 { format!("'{name}'") } else { "''".to_string() };
                format!("{file} using 1:{} with lines", i + 2)
            })
            .collect();
        text.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    }
    fs::write(&script, text).map_err(io_err(&script))?;
    Ok(script)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), OutputError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| OutputError {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, e),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses a CSV written by [`emit_series`]; empty cells become `None`.
pub fn read_series_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), OutputError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        rows.push(record.iter().map(|c| c.parse::<f64>().ok()).collect());
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_curve_list_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let s = emit_series(&[], &path).unwrap();
        assert_eq!(s.rows, 0);
        assert_eq!(fs::read_to_string(&path).unwrap(), "t\n");
        assert!(dir.path().join("empty.gp").exists());
    }

    #[test]
    fn aligned_curves_give_three_columns_at_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        let grid = [0.0, 0.5, 1.0];
        let a = [0.1, 1.0 / 3.0, 2.0f64.sqrt()];
        let b = [1.0, 2.0, 3.0];
        emit_series(&[Series::new("a", &grid, &a), Series::new("b", &grid, &b)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let (header, rows) = read_series_csv(&path).unwrap();
        assert_eq!(header, ["t", "a", "b"]);
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 3);
            // 17 significant digits round-trip exactly
            assert_eq!(row[1].unwrap().to_bits(), a[i].to_bits());
        }
        let script = fs::read_to_string(dir.path().join("two.gp")).unwrap();
        assert!(script.contains("'two.csv' using 1:2"));
        assert!(script.contains("'' using 1:3"));
    }

    #[test]
    fn truncated_curve_leaves_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefix.csv");
        let grid = [0.0, 1.0, 2.0, 3.0];
        let s = emit_series(
            &[Series::new("full", &grid, &[1.0; 4]), Series::new("short", &grid[..2], &[2.0; 2])],
            &path,
        )
        .unwrap();
        assert!(!s.resampled);
        let (_, rows) = read_series_csv(&path).unwrap();
        assert_eq!(rows[1][2], Some(2.0));
        assert_eq!(rows[3][2], None);
    }

    #[test]
    fn misaligned_grids_resample_to_coarsest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mis.csv");
        // fine grid step 0.1 on [0, 2], coarse grid step 0.5 on [0.5, 3]
        let fine: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let coarse: Vec<f64> = (1..=6).map(|i| i as f64 * 0.5).collect();
        let lin = |g: &[f64]| g.iter().map(|t| 2.0 * t + 1.0).collect::<Vec<_>>();
        let s = emit_series(
            &[Series::new("fine", &fine, &lin(&fine)), Series::new("coarse", &coarse, &lin(&coarse))],
            &path,
        )
        .unwrap();
        assert!(s.resampled);
        // common span [0.5, 2] on the coarse step: 0.5, 1.0, 1.5, 2.0
        assert_eq!(s.rows, 4);
        let (_, rows) = read_series_csv(&path).unwrap();
        for row in rows {
            let t = row[0].unwrap();
            assert!((row[1].unwrap() - (2.0 * t + 1.0)).abs() < 1e-12);
            assert!((row[2].unwrap() - (2.0 * t + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let path = blocker.join("sub").join("out.csv");
        let err = emit_series(&[], &path).unwrap_err();
        assert!(err.to_string().contains("out.csv"), "{err}");
    }
}
