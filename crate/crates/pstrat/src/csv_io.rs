//! Dataset CSV reading and writing.
//!
//! Rows are numbered from 1 after the header, so row `r` sits on line
//! `r + 1` of the file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use pstrat_core::{Arm, ObservedDataset, Stratum, Unit};
use serde::{Deserialize, Serialize};

use crate::InputError;

/// Header names of the input columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnNames {
    pub z: String,
    pub d: String,
    pub y1: String,
    /// `None` reads a file without a secondary outcome.
    pub y2: Option<String>,
}

impl Default for ColumnNames {
    fn default() -> Self {
        ColumnNames { z: "z".into(), d: "d".into(), y1: "y1".into(), y2: Some("y2".into()) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestOptions {
    pub columns: ColumnNames,
    /// Replace `y1` by its natural logarithm.
    pub log_y1: bool,
}

fn invalid(msg: String) -> anyhow::Error {
    InputError(msg).into()
}

fn parse_indicator(raw: &str, row: usize, col: &str) -> Result<bool> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => match other.parse::<f64>() {
            Ok(0.0) => Ok(false),
            Ok(1.0) => Ok(true),
            _ => Err(invalid(format!("row {row}: column `{col}` must be 0 or 1, found `{other}`"))),
        },
    }
}

fn parse_real(raw: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| invalid(format!("row {row}: column `{col}` is not a number: `{}`", raw.trim())))?;
    if !v.is_finite() {
        return Err(invalid(format!("row {row}: column `{col}` is not finite: `{}`", raw.trim())));
    }
    Ok(v)
}

/// Reads a dataset. Rows with a missing value in any selected column are
/// rejected together, listing their row numbers.
pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<ObservedDataset> {
    let file = File::open(path).map_err(|e| invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().with_context(|| format!("reading header of {}", path.display()))?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: unknown column `{name}`", path.display())))
    };
    let cols = &opts.columns;
    let (iz, id, iy1) = (find(&cols.z)?, find(&cols.d)?, find(&cols.y1)?);
    let iy2 = cols.y2.as_deref().map(find).transpose()?;

    let mut units = Vec::new();
    let mut missing = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| invalid(format!("row {row}: {e}")))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let selected = [Some(iz), Some(id), Some(iy1), iy2];
        if selected.iter().flatten().any(|&k| field(k).is_empty()) {
            missing.push(row);
            continue;
        }
        let z = parse_indicator(field(iz), row, &cols.z)?;
        let d = parse_indicator(field(id), row, &cols.d)?;
        if !z && d {
            return Err(invalid(format!(
                "row {row}: unit assigned to control (z=0) took up treatment (d=1); one-sided noncompliance forbids this"
            )));
        }
        let mut y1 = parse_real(field(iy1), row, &cols.y1)?;
        if opts.log_y1 {
            if y1 <= 0.0 {
                return Err(invalid(format!("row {row}: cannot take the log of y1 = {y1}")));
            }
            y1 = y1.ln();
        }
        let y2 = match (iy2, cols.y2.as_deref()) {
            (Some(k), Some(name)) => Some(parse_real(field(k), row, name)?),
            _ => None,
        };
        units.push(Unit { z: Arm::from_treated(z), d, y1, y2 });
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(|r| r.to_string()).collect();
        let more = if missing.len() > 20 { format!(" and {} more", missing.len() - 20) } else { String::new() };
        return Err(invalid(format!(
            "{}: {} row(s) with missing values: {}{more}",
            path.display(),
            missing.len(),
            shown.join(", ")
        )));
    }
    if units.is_empty() {
        return Err(invalid(format!("{}: no data rows", path.display())));
    }
    Ok(ObservedDataset::new(units))
}

/// 17 significant digits: enough to read back the same `f64`.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `data` with header `z,d,y1,y2` (no `y2` column when no unit has
/// one).
pub fn write_csv(path: &Path, data: &ObservedDataset) -> Result<()> {
    let has_y2 = data.units.iter().any(|u| u.y2.is_some());
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{}", if has_y2 { "z,d,y1,y2" } else { "z,d,y1" })?;
    for u in &data.units {
        let (z, d) = (u8::from(u.z == Arm::Treated), u8::from(u.d));
        match (has_y2, u.y2) {
            (true, Some(y2)) => writeln!(w, "{z},{d},{},{}", fmt_exact(u.y1), fmt_exact(y2))?,
            (true, None) => writeln!(w, "{z},{d},{},", fmt_exact(u.y1))?,
            (false, _) => writeln!(w, "{z},{d},{}", fmt_exact(u.y1))?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes true strata (`c` or `n`), one per row of the matching data file.
pub fn write_strata(path: &Path, strata: &[Stratum]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "stratum")?;
    for s in strata {
        writeln!(w, "{}", s.short())?;
    }
    w.flush()?;
    Ok(())
}
