//! Versioned JSON artifacts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::plants::matrix_from_rows;

/// Leading fields of every JSON artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
}

impl Header {
    pub fn new(format: &str, version: u32) -> Self {
        Header { format: format.to_string(), version }
    }

    pub fn expect(&self, format: &str, version: u32) -> Result<()> {
        if self.format != format || self.version != version {
            return Err(Error::InvalidArgument(format!(
                "expected {format} v{version}, found {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Like [`matrix_from_rows`] but keeps the shape of empty matrices.
pub fn matrix_from_rows_shaped(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, ncols));
    }
    let m = matrix_from_rows(rows)?;
    if m.ncols() != ncols {
        return Err(Error::Dimension(format!("expected {ncols} columns, found {}", m.ncols())));
    }
    Ok(m)
}

pub fn vector_from(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 0.1 + 0.2]);
        let back = matrix_from_rows(&matrix_rows(&m)).unwrap();
        assert_eq!(back, m);
        let empty = DMatrix::<f64>::zeros(0, 4);
        assert_eq!(matrix_from_rows_shaped(&matrix_rows(&empty), 4).unwrap().shape(), (0, 4));
    }

    #[test]
    fn json_floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let vals = vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300, f64::MAX];
        write_json(&path, &vals).unwrap();
        let back: Vec<f64> = read_json(&path).unwrap();
        assert_eq!(back, vals);
    }

    #[test]
    fn header_mismatch_is_reported() {
        let h = Header::new("model", 1);
        assert!(h.expect("model", 1).is_ok());
        assert!(h.expect("model", 2).is_err());
        assert!(h.expect("predictor", 1).is_err());
    }
}
