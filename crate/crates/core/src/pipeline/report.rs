//! Merge the per-run report tables into one long-format CSV (one metric per
//! row) and plot-ready JSON series.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::ID_COLUMNS;

pub const LONG_COLUMNS: [&str; 10] = [
    "run",
    "manifest_hash",
    "seed",
    "model",
    "sampler",
    "table",
    "subject",
    "m",
    "metric",
    "value",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiagonalPoint {
    pub run: String,
    pub sampler: String,
    pub predicate: String,
    pub real: f64,
    pub inferred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StabilitySeries {
    pub run: String,
    pub sampler: String,
    pub predicate: String,
    pub m: Vec<usize>,
    pub inferred: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DefenseBar {
    pub run: String,
    pub sampler: String,
    pub property: String,
    pub predicate: String,
    pub gamma: f64,
    pub inferred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UtilityBar {
    pub run: String,
    pub sampler: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

/// Series behind the standard figures: inferred against real proportion,
/// estimate against sample count, and defended proportions against targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PlotData {
    pub diagonal: Vec<DiagonalPoint>,
    pub stability: Vec<StabilitySeries>,
    pub defense: Vec<DefenseBar>,
    pub utility: Vec<UtilityBar>,
}

pub struct MergedReport {
    pub rows: Vec<Vec<String>>,
    pub plots: PlotData,
}

impl MergedReport {
    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(LONG_COLUMNS)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn plots_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(&self.plots)?;
        v.push(b'\n');
        Ok(v)
    }
}

fn schema_version(dir: &Path) -> Result<u64> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::input(format!("{} is not a run directory", dir.display())));
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    v.get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::input(format!("{}: no schema_version", path.display())))
}

type Table = Vec<BTreeMap<String, String>>;

fn read_table(path: &Path) -> Result<Table> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let text = row.get(key).map(String::as_str).unwrap_or_default();
    text.parse()
        .map_err(|_| Error::input(format!("report column `{key}` holds `{text}`, not a number")))
}

/// Merge the reports of every run directory. Identical rows from repeated
/// directories appear once.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<MergedReport> {
    if dirs.is_empty() {
        return Err(Error::input("no run directories to report on"));
    }
    let versions: Vec<u64> = dirs.iter().map(|d| schema_version(d)).collect::<Result<_>>()?;
    if versions.iter().any(|&v| v != versions[0]) {
        return Err(Error::input(format!("conflicting schema versions across runs: {versions:?}")));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut plots = PlotData::default();
    let mut series: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for dir in dirs {
        let reports = dir.join("reports");
        let mut push = |row: &BTreeMap<String, String>, table: &str, subject: &str, m: &str, metric: &str, value: &str| {
            let mut out: Vec<String> = ID_COLUMNS.iter().map(|c| row.get(*c).cloned().unwrap_or_default()).collect();
            out.extend([table, subject, m, metric, value].map(String::from));
            if seen.insert(out.clone()) {
                rows.push(out);
            }
        };
        for row in read_table(&reports.join("attack.csv"))? {
            let subject = &row["predicate"];
            for metric in ["real", "inferred", "abs_difference"] {
                if !row[metric].is_empty() {
                    push(&row, "attack", subject, &row["m"], metric, &row[metric]);
                }
            }
            if !row["real"].is_empty() {
                plots.diagonal.push(DiagonalPoint {
                    run: row["run"].clone(),
                    sampler: row["sampler"].clone(),
                    predicate: subject.clone(),
                    real: num(&row, "real")?,
                    inferred: num(&row, "inferred")?,
                });
            }
        }
        for row in read_table(&reports.join("stability.csv"))? {
            push(&row, "stability", &row["predicate"], &row["m"], "inferred", &row["inferred"]);
            let key = (row["run"].clone(), row["sampler"].clone(), row["predicate"].clone());
            let i = *series.entry(key.clone()).or_insert_with(|| {
                plots.stability.push(StabilitySeries {
                    run: key.0,
                    sampler: key.1,
                    predicate: key.2,
                    ..StabilitySeries::default()
                });
                plots.stability.len() - 1
            });
            let m = num(&row, "m")? as usize;
            if !plots.stability[i].m.contains(&m) {
                plots.stability[i].m.push(m);
                plots.stability[i].inferred.push(num(&row, "inferred")?);
            }
        }
        for row in read_table(&reports.join("defense.csv"))? {
            let subject = format!("{}/{}", row["property"], row["predicate"]);
            for metric in ["gamma", "inferred", "abs_difference", "assigned"] {
                push(&row, "defense", &subject, &row["m"], metric, &row[metric]);
            }
            plots.defense.push(DefenseBar {
                run: row["run"].clone(),
                sampler: row["sampler"].clone(),
                property: row["property"].clone(),
                predicate: row["predicate"].clone(),
                gamma: num(&row, "gamma")?,
                inferred: num(&row, "inferred")?,
            });
        }
        for row in read_table(&reports.join("utility.csv"))? {
            push(&row, "utility", &row["variant"], &row["n"], &row["metric"], &row["value"]);
            plots.utility.push(UtilityBar {
                run: row["run"].clone(),
                sampler: row["sampler"].clone(),
                variant: row["variant"].clone(),
                metric: row["metric"].clone(),
                value: num(&row, "value")?,
            });
        }
    }
    Ok(MergedReport { rows, plots })
}
