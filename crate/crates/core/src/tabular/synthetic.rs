//! Synthetic tabular generators with planted property proportions.
//!
//! Categorical columns and planted numeric thresholds are realized with exact
//! counts (largest-remainder rounding, then a seeded shuffle), so the
//! empirical proportion of every planted property differs from its target by
//! less than `1 / n`. Columns are independent of each other; an optional
//! binary label column depends on them through a logistic model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tabular::dataset::{Split, TabularDataset};
use crate::tabular::schema::{Column, TabularSchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedThreshold {
    pub threshold: f64,
    /// Exact fraction of rows with value `< threshold`.
    pub fraction_below: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnGenerator {
    /// Normal draws restricted to `[min, max]`, optionally rounded.
    Numeric {
        mean: f64,
        std: f64,
        min: f64,
        max: f64,
        #[serde(default)]
        integer: bool,
        #[serde(default)]
        planted: Option<PlantedThreshold>,
    },
    Categorical {
        categories: Vec<String>,
        proportions: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedColumn {
    pub name: String,
    #[serde(flatten)]
    pub generator: ColumnGenerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericEffect {
    pub column: String,
    /// Coefficient on the column's generator-standardized value.
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEffect {
    pub column: String,
    pub category: String,
    pub coef: f64,
}

/// Binary label drawn from `sigmoid(intercept + effects)`; appended as the
/// last column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub name: String,
    pub categories: [String; 2],
    pub intercept: f64,
    #[serde(default)]
    pub numeric: Vec<NumericEffect>,
    #[serde(default)]
    pub categorical: Vec<CategoryEffect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub columns: Vec<GeneratedColumn>,
    #[serde(default)]
    pub label: Option<LabelModel>,
    #[serde(default)]
    pub small: bool,
}

/// Integer counts proportional to `weights` summing to `n` (largest
/// remainder, ties to the lower index).
pub fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut RngStream) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        for c in &self.columns {
            match &c.generator {
                ColumnGenerator::Numeric {
                    mean,
                    std,
                    min,
                    max,
                    planted,
                    ..
                } => {
                    if !(std > &0.0 && min < max && mean.is_finite()) {
                        return Err(Error::input(format!("column `{}`: need std > 0 and min < max", c.name)));
                    }
                    if let Some(p) = planted {
                        if !(p.fraction_below > 0.0 && p.fraction_below < 1.0) {
                            return Err(Error::input(format!(
                                "column `{}`: planted fraction must lie in (0, 1)",
                                c.name
                            )));
                        }
                        if !(p.threshold > *min && p.threshold <= *max) {
                            return Err(Error::input(format!(
                                "column `{}`: threshold outside the value range",
                                c.name
                            )));
                        }
                    }
                }
                ColumnGenerator::Categorical {
                    categories,
                    proportions,
                } => {
                    if categories.len() != proportions.len() {
                        return Err(Error::input(format!(
                            "column `{}`: one proportion per category is required",
                            c.name
                        )));
                    }
                    let sum: f64 = proportions.iter().sum();
                    if proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::input(format!("column `{}`: proportions must sum to 1", c.name)));
                    }
                }
            }
        }
        if let Some(label) = &self.label {
            for e in &label.numeric {
                let col = self.generator(&e.column)?;
                if !matches!(col, ColumnGenerator::Numeric { .. }) {
                    return Err(Error::input(format!("label effect on non-numeric column `{}`", e.column)));
                }
            }
            for e in &label.categorical {
                match self.generator(&e.column)? {
                    ColumnGenerator::Categorical { categories, .. } if categories.contains(&e.category) => {}
                    _ => {
                        return Err(Error::input(format!(
                            "label effect names unknown category `{}` of `{}`",
                            e.category, e.column
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn generator(&self, name: &str) -> Result<&ColumnGenerator> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| &c.generator)
            .ok_or_else(|| Error::input(format!("unknown column `{name}`")))
    }

    pub fn schema(&self) -> Result<TabularSchema> {
        let mut cols: Vec<Column> = self
            .columns
            .iter()
            .map(|c| match &c.generator {
                ColumnGenerator::Numeric { .. } => Column::numeric(&c.name),
                ColumnGenerator::Categorical { categories, .. } => {
                    let cats: Vec<&str> = categories.iter().map(String::as_str).collect();
                    Column::categorical(&c.name, &cats)
                }
            })
            .collect();
        if let Some(label) = &self.label {
            cols.push(Column::categorical(&label.name, &[&label.categories[0], &label.categories[1]]));
        }
        TabularSchema::new(cols, self.small)
    }

    /// `n` rows, all tagged as training rows.
    pub fn generate(&self, n: usize, seed: u64) -> Result<TabularDataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::input("requested zero rows"));
        }
        let schema = self.schema()?;
        let mut rows = Array2::zeros((n, schema.width()));
        for (c, col) in self.columns.iter().enumerate() {
            let mut rng = RngStream::new(seed, c as u64);
            let values = match &col.generator {
                ColumnGenerator::Numeric {
                    mean,
                    std,
                    min,
                    max,
                    integer,
                    planted,
                } => {
                    let draw = |rng: &mut RngStream, accept: &dyn Fn(f64) -> bool| -> Result<f64> {
                        for _ in 0..100_000 {
                            let mut v = mean + std * rng.normal();
                            if *integer {
                                v = v.round();
                            }
                            if v >= *min && v <= *max && accept(v) {
                                return Ok(v);
                            }
                        }
                        Err(Error::input(format!("column `{}`: cannot draw from the requested range", col.name)))
                    };
                    let mut values = Vec::with_capacity(n);
                    match planted {
                        Some(p) => {
                            let counts = apportion(&[p.fraction_below, 1.0 - p.fraction_below], n);
                            for _ in 0..counts[0] {
                                values.push(draw(&mut rng, &|v| v < p.threshold)?);
                            }
                            for _ in 0..counts[1] {
                                values.push(draw(&mut rng, &|v| v >= p.threshold)?);
                            }
                            shuffle(&mut values, &mut rng);
                        }
                        None => {
                            for _ in 0..n {
                                values.push(draw(&mut rng, &|_| true)?);
                            }
                        }
                    }
                    values
                }
                ColumnGenerator::Categorical { proportions, .. } => {
                    let counts = apportion(proportions, n);
                    let mut values: Vec<f64> = counts
                        .iter()
                        .enumerate()
                        .flat_map(|(k, &cnt)| std::iter::repeat_n(k as f64, cnt))
                        .collect();
                    shuffle(&mut values, &mut rng);
                    values
                }
            };
            rows.column_mut(c).assign(&ndarray::Array1::from(values));
        }
        if let Some(label) = &self.label {
            let mut rng = RngStream::new(seed, self.columns.len() as u64);
            let lc = self.columns.len();
            for r in 0..n {
                let mut logit = label.intercept;
                for e in &label.numeric {
                    let c = schema.index_of(&e.column)?;
                    if let ColumnGenerator::Numeric { mean, std, .. } = &self.columns[c].generator {
                        logit += e.coef * (rows[[r, c]] - mean) / std;
                    }
                }
                for e in &label.categorical {
                    let c = schema.index_of(&e.column)?;
                    if rows[[r, c]] as usize == schema.category_index(&e.column, &e.category)? {
                        logit += e.coef;
                    }
                }
                let p = 1.0 / (1.0 + (-logit).exp());
                rows[[r, lc]] = (rng.uniform() < p) as usize as f64;
            }
        }
        TabularDataset::train(schema, rows)
    }

    /// Independent train and test draws; test rows come from a separate
    /// seed stream so the two parts never share draws.
    pub fn generate_split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<TabularDataset> {
        let train = self.generate(n_train, seed)?;
        let test = self.generate(n_test, crate::numerics::derive_seed(seed, "test-split"))?;
        let rows = ndarray::concatenate(ndarray::Axis(0), &[train.rows.view(), test.rows.view()])
            .expect("same width");
        let mut splits = vec![Split::Train; n_train];
        splits.extend(vec![Split::Test; n_test]);
        TabularDataset::new(train.schema, rows, splits)
    }
}

fn numeric(name: &str, mean: f64, std: f64, min: f64, max: f64, planted: Option<(f64, f64)>) -> GeneratedColumn {
    GeneratedColumn {
        name: name.into(),
        generator: ColumnGenerator::Numeric {
            mean,
            std,
            min,
            max,
            integer: true,
            planted: planted.map(|(threshold, fraction_below)| PlantedThreshold {
                threshold,
                fraction_below,
            }),
        },
    }
}

fn categorical(name: &str, cats: &[(&str, f64)]) -> GeneratedColumn {
    GeneratedColumn {
        name: name.into(),
        generator: ColumnGenerator::Categorical {
            categories: cats.iter().map(|(c, _)| c.to_string()).collect(),
            proportions: cats.iter().map(|(_, p)| *p).collect(),
        },
    }
}

fn effect(column: &str, category: &str, coef: f64) -> CategoryEffect {
    CategoryEffect {
        column: column.into(),
        category: category.into(),
        coef,
    }
}

fn slope(column: &str, coef: f64) -> NumericEffect {
    NumericEffect {
        column: column.into(),
        coef,
    }
}

/// Census-like schema: Gender=Male 67.05%, Age<30 29.81%, Race five classes
/// (85.34, 9.64, 3.21, 0.98, 0.83)%, Marital-status=Divorced 13.61%,
/// Workclass=Local-gov 6.42%, and a binary income label.
pub fn adult_like() -> SyntheticSpec {
    SyntheticSpec {
        columns: vec![
            numeric("age", 38.6, 13.6, 17.0, 90.0, Some((30.0, 0.2981))),
            numeric("education_num", 10.1, 2.6, 1.0, 16.0, None),
            numeric("hours_per_week", 40.4, 12.3, 1.0, 99.0, None),
            categorical("gender", &[("Female", 0.3295), ("Male", 0.6705)]),
            categorical(
                "race",
                &[
                    ("White", 0.8534),
                    ("Black", 0.0964),
                    ("Asian-Pac-Islander", 0.0321),
                    ("Amer-Indian-Eskimo", 0.0098),
                    ("Other", 0.0083),
                ],
            ),
            categorical(
                "marital_status",
                &[
                    ("Married", 0.4734),
                    ("Never-married", 0.3281),
                    ("Divorced", 0.1361),
                    ("Separated", 0.0315),
                    ("Widowed", 0.0309),
                ],
            ),
            categorical(
                "workclass",
                &[
                    ("Private", 0.6970),
                    ("Self-emp", 0.1124),
                    ("Local-gov", 0.0642),
                    ("State-gov", 0.0399),
                    ("Federal-gov", 0.0295),
                    ("Other", 0.0570),
                ],
            ),
        ],
        label: Some(LabelModel {
            name: "income".into(),
            categories: ["<=50K".into(), ">50K".into()],
            intercept: -2.6,
            numeric: vec![slope("age", 0.7), slope("education_num", 1.0), slope("hours_per_week", 0.5)],
            categorical: vec![
                effect("marital_status", "Married", 2.0),
                effect("gender", "Male", 0.4),
                effect("workclass", "Self-emp", 0.3),
            ],
        }),
        small: true,
    }
}

/// Banking-like schema: Gender=Male 54.47%, Age<30 16.75%,
/// Geography (49.64, 25.20, 25.16)%, CreditScore<600 30.19%, and a binary
/// exit label.
pub fn churn_like() -> SyntheticSpec {
    SyntheticSpec {
        columns: vec![
            numeric("credit_score", 650.0, 96.0, 350.0, 850.0, Some((600.0, 0.3019))),
            numeric("age", 38.9, 10.5, 18.0, 92.0, Some((30.0, 0.1675))),
            numeric("tenure", 5.0, 2.9, 0.0, 10.0, None),
            categorical("gender", &[("Female", 0.4553), ("Male", 0.5447)]),
            categorical("geography", &[("France", 0.4964), ("Germany", 0.2520), ("Spain", 0.2516)]),
            categorical("active", &[("No", 0.4849), ("Yes", 0.5151)]),
        ],
        label: Some(LabelModel {
            name: "exited".into(),
            categories: ["No".into(), "Yes".into()],
            intercept: -1.4,
            numeric: vec![slope("age", 1.1), slope("credit_score", -0.1)],
            categorical: vec![
                effect("geography", "Germany", 0.8),
                effect("gender", "Male", -0.5),
                effect("active", "Yes", -0.9),
            ],
        }),
        small: true,
    }
}

/// Two Gaussian numeric columns and one binary categorical at 30/70.
pub fn mixed_toy() -> SyntheticSpec {
    let gaussian = |name: &str, mean: f64, std: f64| GeneratedColumn {
        name: name.into(),
        generator: ColumnGenerator::Numeric {
            mean,
            std,
            min: mean - 10.0 * std,
            max: mean + 10.0 * std,
            integer: false,
            planted: None,
        },
    };
    SyntheticSpec {
        columns: vec![
            gaussian("x1", 2.0, 1.0),
            gaussian("x2", -3.0, 0.5),
            categorical("flag", &[("a", 0.3), ("b", 0.7)]),
        ],
        label: None,
        small: true,
    }
}
