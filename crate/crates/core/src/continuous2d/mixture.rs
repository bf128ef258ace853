use nalgebra::{Matrix2, Vector2};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tabular::synthetic::{apportion, shuffle};

/// One Gaussian component. `labels[i]` is the component's value (0 or 1)
/// for property `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub labels: Vec<u8>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
}

/// Points with the hidden per-property labels of the component that drew them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints {
    pub points: Array2<f64>,
    /// `labels[i][r]` is property `i` of row `r`.
    pub labels: Vec<Vec<u8>>,
    /// Index of the drawing component per row.
    pub components: Vec<usize>,
}

impl LabeledPoints {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positive_fraction(&self, property: usize) -> f64 {
        let l = &self.labels[property];
        if l.is_empty() {
            return 0.0;
        }
        l.iter().filter(|&&v| v == 1).count() as f64 / l.len() as f64
    }
}

impl MixtureSpec {
    /// Components at `(+-2, 0)` with unit covariance; the right one carries
    /// the property.
    pub fn two_component() -> Self {
        Self::two_component_at(2.0)
    }

    pub fn two_component_at(offset: f64) -> Self {
        let unit = [[1.0, 0.0], [0.0, 1.0]];
        Self {
            components: vec![
                Component {
                    mean: [-offset, 0.0],
                    cov: unit,
                    labels: vec![0],
                    weight: 0.5,
                },
                Component {
                    mean: [offset, 0.0],
                    cov: unit,
                    labels: vec![1],
                    weight: 0.5,
                },
            ],
        }
    }

    /// Components at `(+-2, +-2)` with unit covariance. Property 0 is
    /// `x > 0`, property 1 is `y > 0`.
    pub fn four_component() -> Self {
        let unit = [[1.0, 0.0], [0.0, 1.0]];
        let mut components = Vec::new();
        for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
            components.push(Component {
                mean: [2.0 * sx, 2.0 * sy],
                cov: unit,
                labels: vec![(sx > 0.0) as u8, (sy > 0.0) as u8],
                weight: 0.25,
            });
        }
        Self { components }
    }

    pub fn properties(&self) -> usize {
        self.components.first().map_or(0, |c| c.labels.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::input("mixture needs at least one component"));
        }
        let p = self.properties();
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("component weights sum to {total}, not 1")));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.labels.len() != p || c.labels.iter().any(|&l| l > 1) {
                return Err(Error::input(format!("component {i}: labels must be 0/1, one per property")));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::input(format!("component {i}: negative weight")));
            }
            let cov = Matrix2::new(c.cov[0][0], c.cov[0][1], c.cov[1][0], c.cov[1][1]);
            if (c.cov[0][1] - c.cov[1][0]).abs() > 1e-12 || cov.cholesky().is_none() {
                return Err(Error::input(format!("component {i}: covariance is not SPD")));
            }
        }
        Ok(())
    }

    /// Component weights reweighted so that property `i` has positive mass
    /// `targets[i]`. Each property's positive and negative components are
    /// scaled by `target / base` and `(1 - target) / (1 - base)`; the result
    /// must realize every target exactly (true for one property, or for
    /// several properties whose labels are independent under the base
    /// weights).
    pub fn reweighted(&self, targets: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if targets.len() != self.properties() {
            return Err(Error::input(format!(
                "{} targets for {} properties",
                targets.len(),
                self.properties()
            )));
        }
        let mut w: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        for (i, &target) in targets.iter().enumerate() {
            if !(target > 0.0 && target < 1.0) {
                return Err(Error::input(format!("target proportion {target} outside (0, 1)")));
            }
            let base: f64 = self
                .components
                .iter()
                .filter(|c| c.labels[i] == 1)
                .map(|c| c.weight)
                .sum();
            if base <= 0.0 || base >= 1.0 {
                return Err(Error::input(format!(
                    "property {i}: proportion {target} is unachievable by reweighting"
                )));
            }
            for (k, c) in self.components.iter().enumerate() {
                w[k] *= if c.labels[i] == 1 {
                    target / base
                } else {
                    (1.0 - target) / (1.0 - base)
                };
            }
        }
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        for (i, &target) in targets.iter().enumerate() {
            let got: f64 = self
                .components
                .iter()
                .zip(&w)
                .filter(|(c, _)| c.labels[i] == 1)
                .map(|(_, v)| v)
                .sum();
            if (got - target).abs() > 1e-9 {
                return Err(Error::input(format!(
                    "property {i}: proportion {target} is unachievable by reweighting (got {got})"
                )));
            }
        }
        Ok(w)
    }

    /// Draw `n` points whose property-positive fractions equal the targets.
    /// Component counts are exact (largest remainder), so each realized
    /// fraction is within `1 / n` of its target times the number of
    /// components.
    pub fn make_dataset(&self, n: usize, targets: &[f64], seed: u64) -> Result<LabeledPoints> {
        let weights = self.reweighted(targets)?;
        let counts = apportion(&weights, n);
        let mut assignment: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
            .collect();
        let mut rng = RngStream::new(seed, 0);
        shuffle(&mut assignment, &mut rng);
        let factors: Vec<Matrix2<f64>> = self
            .components
            .iter()
            .map(|c| {
                Matrix2::new(c.cov[0][0], c.cov[0][1], c.cov[1][0], c.cov[1][1])
                    .cholesky()
                    .expect("validated SPD")
                    .l()
            })
            .collect();
        let mut points = Array2::zeros((n, 2));
        let mut labels = vec![Vec::with_capacity(n); self.properties()];
        for (r, &k) in assignment.iter().enumerate() {
            let c = &self.components[k];
            let z = Vector2::new(rng.normal(), rng.normal());
            let x = factors[k] * z;
            points[[r, 0]] = c.mean[0] + x[0];
            points[[r, 1]] = c.mean[1] + x[1];
            for (i, l) in labels.iter_mut().enumerate() {
                l.push(c.labels[i]);
            }
        }
        Ok(LabeledPoints {
            points,
            labels,
            components: assignment,
        })
    }

    /// Index of the component whose mean is nearest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let d = (x[0] - c.mean[0]).powi(2) + (x[1] - c.mean[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_fractions_hold() {
        let spec = MixtureSpec::two_component();
        for target in [0.5, 0.1] {
            let d = spec.make_dataset(100_000, &[target], 3).unwrap();
            assert!((d.positive_fraction(0) - target).abs() < 0.01);
        }
    }

    #[test]
    fn empty_and_unachievable() {
        let spec = MixtureSpec::two_component();
        assert!(spec.make_dataset(0, &[0.3], 1).unwrap().is_empty());
        assert!(spec.make_dataset(10, &[1.0], 1).is_err());
        let mut single = spec.clone();
        single.components[0].labels = vec![1];
        assert!(single.make_dataset(10, &[0.3], 1).is_err());
    }

    #[test]
    fn independent_properties_reweight_exactly() {
        let spec = MixtureSpec::four_component();
        let d = spec.make_dataset(20_000, &[0.3, 0.4], 9).unwrap();
        assert!((d.positive_fraction(0) - 0.3).abs() < 1e-3);
        assert!((d.positive_fraction(1) - 0.4).abs() < 1e-3);
    }

    #[test]
    fn draws_follow_component_moments() {
        let mut spec = MixtureSpec::two_component();
        spec.components[1].cov = [[0.5, 0.2], [0.2, 0.3]];
        let d = spec.make_dataset(40_000, &[0.5], 2).unwrap();
        let rows: Vec<usize> = (0..d.len()).filter(|&r| d.components[r] == 1).collect();
        let n = rows.len() as f64;
        let mx = rows.iter().map(|&r| d.points[[r, 0]]).sum::<f64>() / n;
        let my = rows.iter().map(|&r| d.points[[r, 1]]).sum::<f64>() / n;
        let cxy = rows.iter().map(|&r| (d.points[[r, 0]] - mx) * (d.points[[r, 1]] - my)).sum::<f64>() / n;
        assert!((mx - 2.0).abs() < 0.02 && my.abs() < 0.02);
        assert!((cxy - 0.2).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = MixtureSpec::two_component();
        spec.components[0].cov = [[1.0, 2.0], [2.0, 1.0]];
        assert!(spec.validate().is_err());
        let mut spec = MixtureSpec::two_component();
        spec.components[0].weight = 0.7;
        assert!(spec.validate().is_err());
    }
}
