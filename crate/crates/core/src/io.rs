//! File formats: counts CSV, model and config JSON, tidy plot CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward_model::{ProbMatrix, SourceModel};
use crate::pipeline::{Observed, Reconstruction, ReconstructionConfig};
use crate::reduction::Rpd;
use crate::sampling::CountMatrix;

fn parse_error(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse { location: location.into(), message: message.into() }
}

/// Parses a square matrix of counts, rows indexed by the signal photon
/// number. An optional `# n_tot=<int>` line gives the number of trials;
/// without it the trials are the sum of the cells. Other `#` lines and blank
/// lines are ignored.
pub fn parse_counts(text: &str) -> Result<CountMatrix> {
    let mut n_tot: Option<u64> = None;
    let mut rows: Vec<(usize, Vec<u64>)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("n_tot=") {
                let v = v.trim().parse::<u64>().map_err(|e| parse_error(format!("line {line_no}"), format!("n_tot: {e}")))?;
                n_tot = Some(v);
            }
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, cell)| {
                cell.trim().parse::<u64>().map_err(|e| {
                    parse_error(format!("line {line_no}, column {}", c + 1), format!("'{}': {e}", cell.trim()))
                })
            })
            .collect::<Result<Vec<u64>>>()?;
        if let Some((first_line, first)) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_error(
                    format!("line {line_no}"),
                    format!("row has {} cells, line {first_line} has {}", row.len(), first.len()),
                ));
            }
        }
        rows.push((line_no, row));
    }
    if rows.is_empty() {
        return Err(parse_error("end of input", "no count rows"));
    }
    let dim = rows.len();
    if rows[0].1.len() != dim {
        return Err(parse_error(
            "end of input",
            format!("matrix is not square: {dim} rows of {} cells", rows[0].1.len()),
        ));
    }
    let counts: Vec<u64> = rows.into_iter().flat_map(|r| r.1).collect();
    let in_range: u64 = counts.iter().sum();
    let n_tot = n_tot.unwrap_or(in_range);
    if n_tot < in_range {
        return Err(parse_error("header", format!("n_tot={n_tot} is below the {in_range} events in the cells")));
    }
    CountMatrix::new(dim - 1, counts, n_tot)
}

pub fn format_counts(counts: &CountMatrix) -> String {
    let mut out = format!("# n_tot={}\n", counts.n_tot());
    for row in counts.counts().chunks(counts.dim()) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn read_counts(path: &Path) -> Result<CountMatrix> {
    let text = fs::read_to_string(path)?;
    parse_counts(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{}: {location}", path.display()), message },
        e => e,
    })
}

pub fn write_counts(path: &Path, counts: &CountMatrix) -> Result<()> {
    Ok(fs::write(path, format_counts(counts))?)
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| parse_error(format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

/// Parses a model file and validates every mode; errors name the offending
/// mode.
pub fn parse_model(text: &str) -> Result<SourceModel> {
    let model: SourceModel = parse_json(text)?;
    for (j, m) in model.modes.iter().enumerate() {
        m.validate().map_err(|e| parse_error(format!("modes[{j}]"), e.to_string()))?;
    }
    SourceModel::new(model.modes, model.n_max)
}

pub fn read_model(path: &Path) -> Result<SourceModel> {
    parse_model(&fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<ReconstructionConfig> {
    let config: ReconstructionConfig = parse_json(text)?;
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<ReconstructionConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, to_json(value)?)?)
}

/// A value in a tidy CSV cell. Floats use the shortest representation that
/// parses back to the same double.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// One header line and one line per row.
pub fn tidy_csv(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Int(v) => v.to_string(),
                Cell::Float(v) => format!("{v:?}"),
                Cell::Text(t) => t.clone(),
                Cell::Empty => String::new(),
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// `n_s,n_i,probability` for every cell.
pub fn jpd_csv(jpd: &ProbMatrix) -> String {
    let rows: Vec<Vec<Cell>> = (0..jpd.dim())
        .flat_map(|ns| (0..jpd.dim()).map(move |ni| (ns, ni)))
        .map(|(ns, ni)| vec![ns.into(), ni.into(), jpd.get(ns, ni).into()])
        .collect();
    tidy_csv(&["n_s", "n_i", "probability"], &rows)
}

/// `n,probability,count,sigma` of a single-arm distribution.
pub fn rpd_csv(rpd: &Rpd) -> String {
    let rows: Vec<Vec<Cell>> = rpd
        .probs
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            vec![
                n.into(),
                p.into(),
                rpd.counts.as_ref().map(|c| c[n]).into(),
                rpd.uncertainties.as_ref().map(|u| u[n]).into(),
            ]
        })
        .collect();
    tidy_csv(&["n", "probability", "count", "sigma"], &rows)
}

/// Writes the report and every intermediate of a reconstruction to `dir`.
/// Returns the file names written.
pub fn write_run_dir(dir: &Path, observed: &Observed, rec: &Reconstruction) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        fs::write(dir.join(name), text)?;
        written.push(name.to_string());
        Ok(())
    };
    let a = &rec.artifacts;
    put("report.json", to_json(&rec.report)?)?;
    put("rpd_signal.csv", rpd_csv(&a.signal_rpd))?;
    put("rpd_idler.csv", rpd_csv(&a.idler_rpd))?;
    if let Some(d) = &a.signal_detection {
        put("detection_signal.json", to_json(d)?)?;
    }
    if let Some(d) = &a.idler_detection {
        put("detection_idler.json", to_json(d)?)?;
    }
    if let Some(o) = &a.assignment {
        put("assignments.json", to_json(o)?)?;
    }
    if !a.refinement_fits.is_empty() {
        put("refinement_fits.json", to_json(&a.refinement_fits)?)?;
    }
    if let Some(f) = &a.final_fit {
        put("final_fit.json", to_json(f)?)?;
        let data = observed.jpd_data(rec.report.config.nominal_trials);
        let total: f64 = data.values.iter().sum();
        let model_total = f.jpd.total();
        let dim = f.jpd.dim();
        let rows: Vec<Vec<Cell>> = (0..dim * dim)
            .map(|k| {
                vec![
                    (k / dim).into(),
                    (k % dim).into(),
                    (data.values[k] / total).into(),
                    (f.jpd.entries()[k] / model_total).into(),
                ]
            })
            .collect();
        put("jpd_fit.csv", tidy_csv(&["n_s", "n_i", "observed", "model"], &rows))?;
    }
    if let Some(l) = &a.lossless {
        put("lossless_jpd.csv", jpd_csv(&l.jpd))?;
    }
    if !a.bootstrap.is_empty() {
        let rows: Vec<Vec<Cell>> =
            a.bootstrap.iter().enumerate().map(|(k, &(e, o))| vec![k.into(), e.into(), o.into()]).collect();
        put("bootstrap.csv", tidy_csv(&["draw", "even_sum", "odd_sum"], &rows))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_header_and_default_total() {
        let c = parse_counts("# n_tot=20\n1,2\n3,4\n").unwrap();
        assert_eq!(c.n_tot(), 20);
        assert_eq!(c.get(1, 0), 3);
        let c = parse_counts("1,2\n\n3,4\n").unwrap();
        assert_eq!(c.n_tot(), 10);
    }

    #[test]
    fn ragged_counts_name_the_line() {
        let e = parse_counts("1,2\n3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_counts("1,2\n3,x\n").unwrap_err();
        assert!(e.to_string().contains("line 2, column 2"), "{e}");
        assert!(parse_counts("1,2,3\n4,5,6\n").is_err());
        assert!(parse_counts("").is_err());
    }

    #[test]
    fn model_errors_name_the_field() {
        let e = parse_model(r#"{"n_max": 5, "modes": [{"type": "thermal", "mux": 1.0, "occupancy": "signal"}]}"#)
            .unwrap_err();
        assert!(e.to_string().contains("mux"), "{e}");
        let e = parse_model(r#"{"n_max": 5, "modes": [{"type": "thermal", "mu": -1.0, "occupancy": "signal"}]}"#)
            .unwrap_err();
        assert!(e.to_string().contains("modes[0]"), "{e}");
    }

    #[test]
    fn float_cells_round_trip() {
        let v = 0.1f64 + 0.2;
        let csv = tidy_csv(&["x"], &[vec![v.into()]]);
        let back: f64 = csv.lines().nth(1).unwrap().parse().unwrap();
        assert_eq!(back.to_bits(), v.to_bits());
    }
}
