//! Utility metrics: F1 of a classifier trained on generated rows and tested
//! on real ones, and the Fréchet distance between Gaussian fits of two
//! feature sets.

pub mod gbdt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{ColumnKind, TabularDataset};
use gbdt::{BoostConfig, Booster};

/// Added to both covariances before the matrix square root.
pub const FRECHET_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Frechet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub metric: Metric,
    pub value: f64,
    pub dataset: String,
    pub model: String,
    pub sampler: String,
    pub n: usize,
}

/// Non-label columns as model features: numeric values as they are,
/// categorical columns one-hot.
fn features(data: &TabularDataset, label: usize) -> Array2<f64> {
    let cols = data.schema.columns();
    let width: usize = cols
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, c)| c.categories().map_or(1, <[String]>::len))
        .sum();
    let mut out = Array2::zeros((data.len(), width));
    for (r, row) in data.rows.rows().into_iter().enumerate() {
        let mut k = 0;
        for (j, c) in cols.iter().enumerate() {
            if j == label {
                continue;
            }
            match c.categories() {
                None => {
                    out[[r, k]] = row[j];
                    k += 1;
                }
                Some(cats) => {
                    out[[r, k + row[j] as usize]] = 1.0;
                    k += cats.len();
                }
            }
        }
    }
    out
}

/// Positive-class F1 (class index 1) for a two-class label, macro F1 over
/// the classes that occur in either truth or prediction otherwise.
pub fn f1_score(truth: &[usize], predicted: &[usize], classes: usize) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::input("F1 needs equal, non-empty label vectors"));
    }
    let per_class = |c: usize| -> Option<f64> {
        let tp = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(predicted).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            None
        } else {
            Some(2.0 * tp / (2.0 * tp + fp + fn_))
        }
    };
    if classes == 2 {
        return Ok(per_class(1).unwrap_or(0.0));
    }
    let scores: Vec<f64> = (0..classes).filter_map(per_class).collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Train the boosted-tree classifier on `synthetic`, score F1 on `real_test`.
pub fn f1_train_synth_test_real(synthetic: &TabularDataset, real_test: &TabularDataset, label: &str) -> Result<f64> {
    if synthetic.schema != real_test.schema {
        return Err(Error::input("synthetic and real data have different schemas"));
    }
    let j = synthetic
        .schema
        .index_of(label)
        .map_err(|_| Error::input(format!("label column `{label}` is absent from the synthetic data")))?;
    let classes = match &synthetic.schema.columns()[j].kind {
        ColumnKind::Categorical { categories } => categories.len(),
        ColumnKind::Numeric => return Err(Error::input(format!("label column `{label}` is not categorical"))),
    };
    if synthetic.is_empty() || real_test.is_empty() {
        return Err(Error::input("F1 needs synthetic and real rows"));
    }
    let y: Vec<usize> = synthetic.rows.column(j).iter().map(|&v| v as usize).collect();
    let booster = Booster::fit(features(synthetic, j).view(), &y, classes, &BoostConfig::default())?;
    let predicted = booster.predict(features(real_test, j).view())?;
    let truth: Vec<usize> = real_test.rows.column(j).iter().map(|&v| v as usize).collect();
    f1_score(&truth, &predicted, classes)
}

fn moments(x: ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n as f64 - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    for a in 0..d {
        cov[(a, a)] += FRECHET_RIDGE;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))` with the trace of the
/// cross term taken as `tr sqrt(sqrt(S1) S2 sqrt(S1))`.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d || d == 0 {
        return Err(Error::input("feature sets must share a non-zero dimension"));
    }
    if a.nrows() < d + 1 || b.nrows() < d + 1 {
        return Err(Error::input(format!("Fréchet distance needs at least {} rows per set", d + 1)));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1)).trace();
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    let scale = s1.trace() + s2.trace() + 1.0;
    if !value.is_finite() || value < -1e-9 * scale {
        let cond = |s: &DMatrix<f64>| {
            let e = SymmetricEigen::new(s.clone()).eigenvalues;
            e.max() / e.min()
        };
        return Err(Error::Numerical(format!(
            "Fréchet distance is {value}; covariance condition numbers {:.3e} and {:.3e}",
            cond(&s1),
            cond(&s2)
        )));
    }
    Ok(value.max(0.0))
}

/// Standardize both sets by the first set's per-column mean and std.
pub fn standardize_by(reference: ArrayView2<f64>, other: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = reference.nrows().max(1) as f64;
    let stats: Vec<(f64, f64)> = (0..reference.ncols())
        .map(|j| {
            let c = reference.column(j);
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
        })
        .collect();
    let apply = |x: ArrayView2<f64>| {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (v, (m, s)) in row.iter_mut().zip(&stats) {
                *v = (*v - m) / s;
            }
        }
        out
    };
    (apply(reference), apply(other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::tabular::synthetic::{adult_like, shuffle};
    use crate::tabular::Split;
    use proptest::prelude::*;

    fn gaussian(n: usize, d: usize, mean: f64, std: f64, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, 0);
        Array2::from_shape_fn((n, d), |_| mean + std * rng.normal())
    }

    #[test]
    fn frechet_identical_is_zero() {
        let a = gaussian(500, 3, 0.0, 1.0, 1);
        assert!(frechet_distance(a.view(), a.view()).unwrap() <= 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = gaussian(100_000, 1, 0.0, 1.0, 2);
        let b = gaussian(100_000, 1, 1.0, 2.0, 3);
        let v = frechet_distance(a.view(), b.view()).unwrap();
        assert!((v - 2.0).abs() <= 0.05, "{v}");
    }

    #[test]
    fn frechet_preconditions() {
        let a = gaussian(3, 3, 0.0, 1.0, 1);
        assert!(frechet_distance(a.view(), a.view()).is_err());
        let b = gaussian(10, 2, 0.0, 1.0, 1);
        assert!(frechet_distance(a.view(), b.view()).is_err());
    }

    #[test]
    fn frechet_rigid_invariance() {
        let a = gaussian(400, 2, 0.0, 1.0, 4);
        let b = gaussian(400, 2, 0.5, 1.5, 5);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |x: &Array2<f64>| {
            Array2::from_shape_fn(x.dim(), |(i, j)| {
                let (u, v) = (x[[i, 0]], x[[i, 1]]);
                if j == 0 { c * u - s * v + 3.0 } else { s * u + c * v - 1.0 }
            })
        };
        let before = frechet_distance(a.view(), b.view()).unwrap();
        let after = frechet_distance(rot(&a).view(), rot(&b).view()).unwrap();
        assert!((before - after).abs() <= 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frechet_symmetric_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, shift in -2.0f64..2.0) {
            let a = gaussian(60, 3, 0.0, 1.0, s1);
            let b = gaussian(60, 3, shift, 1.3, s2 + 5000);
            let ab = frechet_distance(a.view(), b.view()).unwrap();
            let ba = frechet_distance(b.view(), a.view()).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        }
    }

    #[test]
    fn f1_closed_forms() {
        // All-positive predictions on a p-positive set: F1 = 2p / (1 + p).
        let truth: Vec<usize> = (0..1000).map(|i| (i < 300) as usize).collect();
        let f = f1_score(&truth, &[1; 1000], 2).unwrap();
        assert!((f - 2.0 * 0.3 / 1.3).abs() < 1e-12);
        assert_eq!(f1_score(&truth, &truth, 2).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    }

    fn adult() -> (TabularDataset, TabularDataset) {
        let d = adult_like().generate_split(6000, 3000, 3).unwrap();
        (d.select(Split::Train), d.select(Split::Test))
    }

    #[test]
    fn copy_of_real_matches_real() {
        let (train, test) = adult();
        let real = f1_train_synth_test_real(&train, &test, "income").unwrap();
        let copy = f1_train_synth_test_real(&train.clone(), &test, "income").unwrap();
        assert!((real - copy).abs() <= 0.02);
        assert!(real > 0.4, "{real}");
    }

    #[test]
    fn shuffled_labels_are_chance() {
        // Balanced binary label: the flag of the toy schema relabeled at 50%.
        let (mut train, mut test) = adult();
        let label = train.schema.index_of("gender").unwrap();
        let mut rng = RngStream::new(9, 0);
        for d in [&mut train, &mut test] {
            let mut values: Vec<f64> = (0..d.len()).map(|i| (i % 2) as f64).collect();
            shuffle(&mut values, &mut rng);
            d.rows.column_mut(label).assign(&ndarray::Array1::from(values));
        }
        let f = f1_train_synth_test_real(&train, &test, "gender").unwrap();
        assert!((f - 0.5).abs() <= 0.05, "{f}");
    }

    #[test]
    fn label_must_exist() {
        let (train, test) = adult();
        assert!(f1_train_synth_test_real(&train, &test, "nope").is_err());
        assert!(f1_train_synth_test_real(&train, &test, "age").is_err());
    }
}
