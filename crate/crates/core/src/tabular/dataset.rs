use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::tabular::schema::{ColumnKind, TabularSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Typed rows over a schema. Numeric cells hold values, categorical cells
/// hold the category index.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub schema: TabularSchema,
    pub rows: Array2<f64>,
    pub splits: Vec<Split>,
}

/// A rejected input row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// 1-based line number in the file (the header is line 1).
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: TabularDataset,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl TabularDataset {
    pub fn new(schema: TabularSchema, rows: Array2<f64>, splits: Vec<Split>) -> Result<Self> {
        if rows.ncols() != schema.width() {
            return Err(Error::input(format!(
                "rows have {} columns, schema has {}",
                rows.ncols(),
                schema.width()
            )));
        }
        if splits.len() != rows.nrows() {
            return Err(Error::input("one split tag per row is required"));
        }
        for (c, col) in schema.columns().iter().enumerate() {
            for (r, &v) in rows.column(c).iter().enumerate() {
                let ok = match &col.kind {
                    ColumnKind::Numeric => v.is_finite(),
                    ColumnKind::Categorical { categories } => {
                        v >= 0.0 && v.fract() == 0.0 && (v as usize) < categories.len()
                    }
                };
                if !ok {
                    return Err(Error::input(format!(
                        "row {r}: illegal value {v} in column `{}`",
                        col.name
                    )));
                }
            }
        }
        Ok(Self { schema, rows, splits })
    }

    /// All rows tagged as training rows.
    pub fn train(schema: TabularSchema, rows: Array2<f64>) -> Result<Self> {
        let n = rows.nrows();
        Self::new(schema, rows, vec![Split::Train; n])
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows carrying the given split tag.
    pub fn select(&self, split: Split) -> TabularDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        TabularDataset {
            schema: self.schema.clone(),
            rows: self.rows.select(Axis(0), &idx),
            splits: vec![split; idx.len()],
        }
    }

    /// Render one cell as it appears in CSV.
    pub fn cell_text(&self, row: usize, col: usize) -> String {
        let v = self.rows[[row, col]];
        match &self.schema.columns()[col].kind {
            ColumnKind::Numeric => fmt_f64(v),
            ColumnKind::Categorical { categories } => categories[v as usize].clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.names())?;
        for r in 0..self.len() {
            w.write_record((0..self.schema.width()).map(|c| self.cell_text(r, c)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a CSV file whose header matches the schema's column names in order.
/// Rows with unparseable numeric cells or a wrong field count are dropped
/// and reported; an unknown category is a hard error.
pub fn ingest_csv(path: &Path, schema: &TabularSchema) -> Result<Ingested> {
    let file = File::open(path)?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &TabularSchema) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::input("no rows"));
    }
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != schema.names() {
        return Err(Error::input(format!(
            "header {:?} does not match schema columns {:?}",
            names,
            schema.names()
        )));
    }
    let width = schema.width();
    let mut values = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(RowDiagnostic {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if record.len() != width {
            diagnostics.push(RowDiagnostic {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
            continue;
        }
        let mut row = Vec::with_capacity(width);
        let mut bad = None;
        for (col, cell) in schema.columns().iter().zip(record.iter()) {
            let cell = cell.trim();
            match &col.kind {
                ColumnKind::Numeric => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        bad = Some(format!("column `{}`: cannot parse `{cell}` as a number", col.name));
                        break;
                    }
                },
                ColumnKind::Categorical { categories } => match categories.iter().position(|c| c == cell) {
                    Some(k) => row.push(k as f64),
                    None => {
                        return Err(Error::input(format!(
                            "line {line}: unknown category `{cell}` in column `{}`",
                            col.name
                        )))
                    }
                },
            }
        }
        match bad {
            Some(message) => diagnostics.push(RowDiagnostic { line, message }),
            None => values.extend(row),
        }
    }
    for d in &diagnostics {
        log::warn!("rejected line {}: {}", d.line, d.message);
    }
    let n = values.len() / width;
    if n == 0 {
        return Err(Error::input(if diagnostics.is_empty() {
            "no rows".to_string()
        } else {
            format!("no rows ({} rejected)", diagnostics.len())
        }));
    }
    let rows = Array2::from_shape_vec((n, width), values).expect("width-aligned values");
    Ok(Ingested {
        dataset: TabularDataset::train(schema.clone(), rows)?,
        diagnostics,
    })
}
