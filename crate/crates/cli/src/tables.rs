use std::path::{Path, PathBuf};

use crate::error::{PipelineError, Result};

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
    let csv_err = |e: csv::Error| PipelineError::Csv { path: path.to_path_buf(), detail: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reads a CSV with a header row into string records. Errors name the
/// 1-based line of the offending row.
pub fn read_csv(path: &Path, expect_header: &[&str]) -> Result<Vec<Vec<String>>> {
    let fail = |detail: String| PipelineError::Csv { path: path.to_path_buf(), detail };
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header = r.headers().map_err(|e| fail(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != expect_header {
        return Err(fail(format!("row 1: header {:?}, expected {:?}", header, expect_header)));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fail(format!("row {}: {e}", i + 2)))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

pub fn parse_f(path: &Path, row: usize, field: &str) -> Result<f64> {
    field.parse().map_err(|_| PipelineError::Csv {
        path: path.to_path_buf(),
        detail: format!("row {row}: `{field}` is not a number"),
    })
}
