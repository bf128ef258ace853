use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::continuous2d::PropertyClassifier;
use crate::error::{Error, Result};
use crate::tabular::TabularDataset;

/// What a property test reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredicateKind {
    CategoricalEquals { column: String, value: String },
    /// One class of a k-class column, scored against the rest.
    CategoricalOneVsRest { column: String, value: String },
    NumericLessThan { column: String, threshold: f64 },
    /// Half-open `[lo, hi)`.
    NumericRange { column: String, lo: f64, hi: f64 },
    /// Score above 0.5 from the named classifier.
    ClassifierBased { classifier: String },
}

/// A sensitive property with its arity `k` (the number of values the
/// underlying attribute takes, which sets the default target `1 / k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyPredicate {
    pub id: String,
    #[serde(flatten)]
    pub kind: PredicateKind,
    #[serde(default = "default_arity")]
    pub arity: usize,
}

fn default_arity() -> usize {
    2
}

/// Generated samples as a predicate sees them. Point sets expose their
/// coordinates as columns `x0`, `x1`, ...
#[derive(Clone, Copy)]
pub enum Samples<'a> {
    Tabular(&'a TabularDataset),
    Points {
        points: ArrayView2<'a, f64>,
        classifier: Option<&'a PropertyClassifier>,
    },
}

impl Samples<'_> {
    pub fn len(&self) -> usize {
        match self {
            Samples::Tabular(d) => d.len(),
            Samples::Points { points, .. } => points.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn point_column(name: &str, dim: usize) -> Result<usize> {
    name.strip_prefix('x')
        .and_then(|i| i.parse::<usize>().ok())
        .filter(|&i| i < dim)
        .ok_or_else(|| Error::input(format!("point sets have no column `{name}`")))
}

impl PropertyPredicate {
    pub fn new(id: &str, kind: PredicateKind, arity: usize) -> Result<Self> {
        let p = Self {
            id: id.to_string(),
            kind,
            arity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn categorical_equals(column: &str, value: &str, arity: usize) -> Result<Self> {
        Self::new(
            &format!("{column}={value}"),
            PredicateKind::CategoricalEquals {
                column: column.into(),
                value: value.into(),
            },
            arity,
        )
    }

    pub fn one_vs_rest(column: &str, value: &str, arity: usize) -> Result<Self> {
        Self::new(
            &format!("{column}={value}"),
            PredicateKind::CategoricalOneVsRest {
                column: column.into(),
                value: value.into(),
            },
            arity,
        )
    }

    pub fn numeric_less_than(column: &str, threshold: f64) -> Result<Self> {
        Self::new(
            &format!("{column}<{threshold}"),
            PredicateKind::NumericLessThan {
                column: column.into(),
                threshold,
            },
            2,
        )
    }

    pub fn numeric_range(column: &str, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            &format!("{column} in [{lo},{hi})"),
            PredicateKind::NumericRange {
                column: column.into(),
                lo,
                hi,
            },
            2,
        )
    }

    pub fn classifier_based(classifier: &str) -> Result<Self> {
        Self::new(
            classifier,
            PredicateKind::ClassifierBased {
                classifier: classifier.into(),
            },
            2,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.arity < 2 {
            return Err(Error::input(format!("predicate `{}`: arity must be at least 2", self.id)));
        }
        match &self.kind {
            PredicateKind::NumericLessThan { threshold, .. } if !threshold.is_finite() => {
                Err(Error::input(format!("predicate `{}`: threshold must be finite", self.id)))
            }
            PredicateKind::NumericRange { lo, hi, .. } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                Err(Error::input(format!("predicate `{}`: range needs finite lo < hi", self.id)))
            }
            _ => Ok(()),
        }
    }

    /// The default defense target `1 / k`.
    pub fn default_target(&self) -> f64 {
        1.0 / self.arity as f64
    }

    /// Membership of every sample (true = has the property).
    pub fn evaluate(&self, samples: Samples<'_>) -> Result<Vec<bool>> {
        self.validate()?;
        match samples {
            Samples::Tabular(data) => self.evaluate_tabular(data),
            Samples::Points { points, classifier } => self.evaluate_points(points, classifier),
        }
    }

    fn evaluate_tabular(&self, data: &TabularDataset) -> Result<Vec<bool>> {
        let schema = &data.schema;
        let numeric = |column: &str| -> Result<usize> {
            let j = schema.index_of(column)?;
            if !schema.columns()[j].is_numeric() {
                return Err(Error::input(format!("predicate `{}`: column `{column}` is not numeric", self.id)));
            }
            Ok(j)
        };
        Ok(match &self.kind {
            PredicateKind::CategoricalEquals { column, value }
            | PredicateKind::CategoricalOneVsRest { column, value } => {
                let j = schema.index_of(column)?;
                let target = schema.category_index(column, value)? as f64;
                data.rows.column(j).iter().map(|&v| v == target).collect()
            }
            PredicateKind::NumericLessThan { column, threshold } => {
                let j = numeric(column)?;
                data.rows.column(j).iter().map(|&v| v < *threshold).collect()
            }
            PredicateKind::NumericRange { column, lo, hi } => {
                let j = numeric(column)?;
                data.rows.column(j).iter().map(|&v| v >= *lo && v < *hi).collect()
            }
            PredicateKind::ClassifierBased { .. } => {
                return Err(Error::input(format!(
                    "predicate `{}`: classifier predicates apply to point sets",
                    self.id
                )));
            }
        })
    }

    fn evaluate_points(&self, points: ArrayView2<f64>, classifier: Option<&PropertyClassifier>) -> Result<Vec<bool>> {
        Ok(match &self.kind {
            PredicateKind::ClassifierBased { classifier: name } => {
                let clf = classifier.ok_or_else(|| {
                    Error::input(format!("predicate `{}`: no classifier `{name}` attached", self.id))
                })?;
                clf.predict(points)?.into_iter().map(|p| p == 1).collect()
            }
            PredicateKind::NumericLessThan { column, threshold } => {
                let j = point_column(column, points.ncols())?;
                points.column(j).iter().map(|&v| v < *threshold).collect()
            }
            PredicateKind::NumericRange { column, lo, hi } => {
                let j = point_column(column, points.ncols())?;
                points.column(j).iter().map(|&v| v >= *lo && v < *hi).collect()
            }
            _ => {
                return Err(Error::input(format!(
                    "predicate `{}`: categorical predicates apply to tabular samples",
                    self.id
                )));
            }
        })
    }
}
