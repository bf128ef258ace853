use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            ColumnKind::Categorical { categories } => Some(categories),
            ColumnKind::Numeric => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, ColumnKind::Numeric)
    }
}

/// Ordered column list. Categorical cells are stored as category indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct TabularSchema {
    columns: Vec<Column>,
    small: bool,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    columns: Vec<Column>,
    /// Small schemas sample with 100 diffusion steps instead of 1000.
    #[serde(default)]
    small: bool,
}

impl TryFrom<RawSchema> for TabularSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        Self::new(raw.columns, raw.small)
    }
}

impl From<TabularSchema> for RawSchema {
    fn from(s: TabularSchema) -> Self {
        RawSchema {
            columns: s.columns,
            small: s.small,
        }
    }
}

impl TabularSchema {
    pub fn new(columns: Vec<Column>, small: bool) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::input("schema needs at least one column"));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::input(format!("duplicate column name `{}`", c.name)));
            }
            if let Some(cats) = c.categories() {
                if cats.len() < 2 {
                    return Err(Error::input(format!(
                        "categorical column `{}` needs at least two categories",
                        c.name
                    )));
                }
                let distinct: HashSet<&String> = cats.iter().collect();
                if distinct.len() != cats.len() {
                    return Err(Error::input(format!("column `{}` repeats a category", c.name)));
                }
            }
        }
        Ok(Self { columns, small })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn is_small(&self) -> bool {
        self.small
    }

    /// Diffusion steps used for this schema: 100 when tagged small, else 1000.
    pub fn default_steps(&self) -> usize {
        if self.small {
            100
        } else {
            1000
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::input(format!("unknown column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.index_of(name)?])
    }

    /// Index of `value` within a categorical column's categories.
    pub fn category_index(&self, column: &str, value: &str) -> Result<usize> {
        let col = self.column(column)?;
        let cats = col
            .categories()
            .ok_or_else(|| Error::input(format!("column `{column}` is not categorical")))?;
        cats.iter()
            .position(|c| c == value)
            .ok_or_else(|| Error::input(format!("unknown category `{value}` in column `{column}`")))
    }

    pub fn numeric_indices(&self) -> Vec<usize> {
        (0..self.width()).filter(|&i| self.columns[i].is_numeric()).collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.width()).filter(|&i| !self.columns[i].is_numeric()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(TabularSchema::new(vec![], false).is_err());
        assert!(TabularSchema::new(vec![Column::numeric("a"), Column::numeric("a")], false).is_err());
        assert!(TabularSchema::new(vec![Column::categorical("c", &["x"])], false).is_err());
        assert!(TabularSchema::new(vec![Column::categorical("c", &["x", "x"])], false).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = TabularSchema::new(
            vec![Column::numeric("age"), Column::categorical("gender", &["Female", "Male"])],
            true,
        )
        .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains(r#""kind":"categorical""#));
        let back: TabularSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"columns":[{"name":"c","kind":"categorical","categories":["x"]}]}"#;
        assert!(serde_json::from_str::<TabularSchema>(bad).is_err());
    }

    #[test]
    fn lookups() {
        let s = TabularSchema::new(
            vec![Column::numeric("age"), Column::categorical("gender", &["Female", "Male"])],
            false,
        )
        .unwrap();
        assert_eq!(s.category_index("gender", "Male").unwrap(), 1);
        assert!(s.category_index("gender", "Other").is_err());
        assert!(s.category_index("age", "1").is_err());
        assert_eq!(s.numeric_indices(), vec![0]);
        assert_eq!(s.categorical_indices(), vec![1]);
        assert_eq!(s.default_steps(), 1000);
    }
}
