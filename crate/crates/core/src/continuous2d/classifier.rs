use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{opt_step, Activation, Mlp, OptState, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            steps: 1500,
            batch_size: 128,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStats {
    pub rows: usize,
    pub positives: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Binary property classifier: an MLP with a sigmoid head trained with
/// cross-entropy. A score above 0.5 predicts the property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyClassifier {
    pub net: Mlp,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub stats: ClassifierStats,
}

const SCORE_FLOOR: f64 = 1e-15;

fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

impl PropertyClassifier {
    pub fn train(points: ArrayView2<f64>, labels: &[u8], config: &ClassifierConfig, seed: u64) -> Result<Self> {
        let n = points.nrows();
        if n == 0 || labels.len() != n {
            return Err(Error::input(format!("{} points with {} labels", n, labels.len())));
        }
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives == 0 || positives == n {
            return Err(Error::input("shadow set contains a single class"));
        }
        let dim = points.ncols();
        let mean: Vec<f64> = points.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std: Vec<f64> = points
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 0.0 { s } else { 1.0 })
            .collect();

        let mut rng = RngStream::new(seed, 0);
        let mut dims = vec![dim];
        dims.extend(&config.hidden);
        dims.push(1);
        let mut clf = Self {
            net: Mlp::new(&dims, Activation::Tanh, &mut rng)?,
            mean,
            std,
            stats: ClassifierStats {
                rows: n,
                positives,
                final_loss: f64::NAN,
                train_accuracy: f64::NAN,
            },
        };
        let standardized = clf.standardize(points);
        let mut opt = OptState::new(config.lr);
        let b = config.batch_size.max(1);
        let mut batch = Array2::zeros((b, dim));
        let mut targets = vec![0.0; b];
        let mut loss = f64::NAN;
        for _ in 0..config.steps {
            for (i, mut row) in batch.rows_mut().into_iter().enumerate() {
                let r = rng.below(n);
                row.assign(&standardized.row(r));
                targets[i] = labels[r] as f64;
            }
            let (logits, cache) = clf.net.forward_cached(batch.view())?;
            let mut grad = Array2::zeros((b, 1));
            loss = 0.0;
            for i in 0..b {
                let z = logits[[i, 0]];
                // Numerically stable BCE on logits.
                loss += z.max(0.0) - z * targets[i] + (-z.abs()).exp().ln_1p();
                grad[[i, 0]] = (1.0 / (1.0 + (-z).exp()) - targets[i]) / b as f64;
            }
            loss /= b as f64;
            if !loss.is_finite() {
                return Err(Error::Training("classifier loss diverged".into()));
            }
            let (grads, _) = clf.net.backward(&cache, grad.view())?;
            opt_step(&mut clf.net, &grads, &mut opt)?;
        }
        clf.stats.final_loss = loss;
        clf.stats.train_accuracy = clf.accuracy(points, labels)?;
        Ok(clf)
    }

    fn standardize(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let mut out = points.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Scores in (0, 1).
    pub fn scores(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        if points.ncols() != self.dim() {
            return Err(Error::input(format!(
                "classifier expects {} columns, got {}",
                self.dim(),
                points.ncols()
            )));
        }
        if points.nrows() == 0 {
            return Ok(Vec::new());
        }
        let logits = self.net.forward(self.standardize(points).view())?;
        Ok(logits.column(0).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Ties at exactly 0.5 count as negative.
    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Vec<u8>> {
        Ok(self.scores(points)?.into_iter().map(|s| (s > 0.5) as u8).collect())
    }

    pub fn accuracy(&self, points: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
        if labels.len() != points.nrows() || labels.is_empty() {
            return Err(Error::input("accuracy needs one label per point"));
        }
        let pred = self.predict(points)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous2d::MixtureSpec;

    fn split(offset: f64) -> (crate::continuous2d::LabeledPoints, crate::continuous2d::LabeledPoints) {
        let spec = MixtureSpec::two_component_at(offset);
        (
            spec.make_dataset(4000, &[0.5], 1).unwrap(),
            spec.make_dataset(4000, &[0.5], 2).unwrap(),
        )
    }

    #[test]
    fn separable_components_classify_cleanly() {
        let (shadow, held) = split(4.0);
        let clf = PropertyClassifier::train(shadow.points.view(), &shadow.labels[0], &ClassifierConfig::default(), 5)
            .unwrap();
        assert!(clf.accuracy(held.points.view(), &held.labels[0]).unwrap() >= 0.99);
        let scores = clf.scores(held.points.view()).unwrap();
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (s, &l) in scores.iter().zip(&held.labels[0]) {
            if l == 1 { pos.push(*s) } else { neg.push(*s) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&pos) > 0.9 && mean(&neg) < 0.1);
        let hit = pos.iter().filter(|&&s| s > 0.5).count() as f64 / pos.len() as f64;
        assert!(hit >= 0.95);
    }

    #[test]
    fn default_spec_reaches_bayes_accuracy() {
        // Bayes accuracy for means at +-2 with unit variance is Phi(2) = 0.977.
        let (shadow, held) = split(2.0);
        let clf = PropertyClassifier::train(shadow.points.view(), &shadow.labels[0], &ClassifierConfig::default(), 5)
            .unwrap();
        assert!(clf.accuracy(held.points.view(), &held.labels[0]).unwrap() >= 0.95);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let (shadow, held) = split(2.0);
        // Labels independent of the points on both sides; a classifier fit to
        // noise can still line up with the component split, so held-out labels
        // are shuffled too.
        let mut labels = shadow.labels[0].clone();
        crate::tabular::synthetic::shuffle(&mut labels, &mut RngStream::new(3, 0));
        let mut held_labels = held.labels[0].clone();
        crate::tabular::synthetic::shuffle(&mut held_labels, &mut RngStream::new(4, 0));
        let clf = PropertyClassifier::train(shadow.points.view(), &labels, &ClassifierConfig::default(), 5).unwrap();
        let acc = clf.accuracy(held.points.view(), &held_labels).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn single_class_is_rejected() {
        let (shadow, _) = split(2.0);
        let ones = vec![1u8; shadow.len()];
        assert!(PropertyClassifier::train(shadow.points.view(), &ones, &ClassifierConfig::default(), 5).is_err());
    }
}
