//! File formats shared by the pipeline stages.
//!
//! Point sets use a binary matrix format: one JSON header line
//! `{"rows":R,"cols":C,"dtype":"f64le"}` followed by `R * C` little-endian
//! doubles in row-major order. Floats in text formats carry 17 significant
//! digits so they round-trip exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text form of a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // Keep the sign of negative zero out of reports.
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    format!("{v:.16e}")
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    dtype: String,
}

pub fn write_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    let header = MatrixHeader {
        rows: x.nrows(),
        cols: x.ncols(),
        dtype: "f64le".into(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(x.len() * 8);
    for v in x.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: MatrixHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::input(format!("{}: bad matrix header: {e}", path.display())))?;
    if header.dtype != "f64le" {
        return Err(Error::input(format!("{}: unsupported dtype {}", path.display(), header.dtype)));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expected = header.rows * header.cols * 8;
    if bytes.len() != expected {
        return Err(Error::input(format!(
            "{}: expected {expected} payload bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((header.rows, header.cols), values).map_err(|e| Error::input(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

/// Write through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
