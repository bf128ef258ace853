use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::dataset::TabularDataset;
use crate::tabular::schema::{ColumnKind, TabularSchema};

/// Maps rows to the diffusion state: the standardized numeric block first,
/// then one one-hot block per categorical column in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCodec {
    /// Schema positions of numeric columns, in state order.
    pub numeric_columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Schema positions of categorical columns, in state order.
    pub categorical_columns: Vec<usize>,
    pub cardinalities: Vec<usize>,
    width: usize,
}

/// Location of one categorical column's one-hot block in the state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub column: usize,
    pub offset: usize,
    pub len: usize,
}

impl TabularCodec {
    /// Fit standardization statistics on every row of the dataset. A numeric
    /// column with zero variance keeps std 1 so encoding stays finite.
    pub fn fit(dataset: &TabularDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::input("cannot fit a codec on an empty dataset"));
        }
        let schema = &dataset.schema;
        let numeric_columns = schema.numeric_indices();
        let categorical_columns = schema.categorical_indices();
        let n = dataset.len() as f64;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for &c in &numeric_columns {
            let col = dataset.rows.column(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mut std = var.sqrt();
            if !(std > 1e-12) {
                log::warn!(
                    "numeric column `{}` has zero variance; using std 1",
                    schema.columns()[c].name
                );
                std = 1.0;
            }
            means.push(mean);
            stds.push(std);
        }
        let cardinalities = categorical_columns
            .iter()
            .map(|&c| match &schema.columns()[c].kind {
                ColumnKind::Categorical { categories } => categories.len(),
                ColumnKind::Numeric => unreachable!("categorical index"),
            })
            .collect();
        Ok(Self {
            numeric_columns,
            means,
            stds,
            categorical_columns,
            cardinalities,
            width: schema.width(),
        })
    }

    pub fn numeric_dim(&self) -> usize {
        self.numeric_columns.len()
    }

    pub fn state_dim(&self) -> usize {
        self.numeric_dim() + self.cardinalities.iter().sum::<usize>()
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut offset = self.numeric_dim();
        self.categorical_columns
            .iter()
            .zip(&self.cardinalities)
            .map(|(&column, &len)| {
                let b = Block { column, offset, len };
                offset += len;
                b
            })
            .collect()
    }

    /// State offset of a numeric column, or the block of a categorical one.
    pub fn state_position(&self, column: usize) -> Result<StatePosition> {
        if let Some(i) = self.numeric_columns.iter().position(|&c| c == column) {
            return Ok(StatePosition::Numeric(i));
        }
        self.blocks()
            .into_iter()
            .find(|b| b.column == column)
            .map(StatePosition::Block)
            .ok_or_else(|| Error::input(format!("column {column} is not in the codec")))
    }

    pub fn encode_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.width {
            return Err(Error::input(format!("row has {} cells, expected {}", row.len(), self.width)));
        }
        let mut out = vec![0.0; self.state_dim()];
        for (i, &c) in self.numeric_columns.iter().enumerate() {
            out[i] = (row[c] - self.means[i]) / self.stds[i];
        }
        for b in self.blocks() {
            let v = row[b.column];
            if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < b.len) {
                return Err(Error::input(format!("category index {v} out of range for column {}", b.column)));
            }
            out[b.offset + v as usize] = 1.0;
        }
        Ok(out)
    }

    pub fn encode(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows.nrows(), self.state_dim()));
        for (r, row) in rows.rows().into_iter().enumerate() {
            let enc = self.encode_row(&row.to_vec())?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&enc));
        }
        Ok(out)
    }

    /// Invert the numeric standardization; categorical blocks decode to the
    /// arg-max category (lowest index on ties).
    pub fn decode_row(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::input(format!(
                "state has dimension {}, expected {}",
                state.len(),
                self.state_dim()
            )));
        }
        let mut row = vec![0.0; self.width];
        for (i, &c) in self.numeric_columns.iter().enumerate() {
            row[c] = state[i] * self.stds[i] + self.means[i];
        }
        for b in self.blocks() {
            row[b.column] = argmax(&state[b.offset..b.offset + b.len]) as f64;
        }
        Ok(row)
    }

    pub fn decode(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), self.width));
        for (r, s) in states.rows().into_iter().enumerate() {
            let row = self.decode_row(&s.to_vec())?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(out)
    }

    /// Decode states into a dataset over `schema` (all rows tagged train).
    pub fn decode_dataset(&self, schema: &TabularSchema, states: ArrayView2<f64>) -> Result<TabularDataset> {
        TabularDataset::train(schema.clone(), self.decode(states)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatePosition {
    Numeric(usize),
    Block(Block),
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
