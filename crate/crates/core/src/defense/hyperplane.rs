use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Below this training accuracy a fit is flagged as not separating.
pub const MIN_ACCURACY: f64 = 0.6;
pub const MIN_POINTS: usize = 50;
/// Normals with `|cos| above 1 - PARALLEL_TOL` cannot be orthogonalized.
pub const PARALLEL_TOL: f64 = 1e-6;
pub const REACH_QUANTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub points: usize,
    pub positives: usize,
    /// Geometric margin `1 / |w|` of the soft-margin solution.
    pub margin: f64,
    /// 99th percentile, over the fitted states, of the distance along the
    /// normal to the median position of the opposite class: how far a chain
    /// must travel to look like the other side.
    pub reach: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// A separating hyperplane `normal . x + bias = 0` in the state space at one
/// grid index, with a unit normal pointing to the property-positive side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub property: String,
    pub step: usize,
    pub normal: Vec<f64>,
    pub bias: f64,
    pub diagnostics: FitDiagnostics,
}

impl Hyperplane {
    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) + self.bias
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Linear SVM by Pegasos (hinge loss, L2 penalty, `1 / (lambda t)` steps
/// with projection onto the `1 / sqrt(lambda)` ball), averaged over the
/// second half of the run. Points are centered first and the bias is an
/// extra constant feature.
pub fn fit_hyperplane(
    x: ArrayView2<f64>,
    labels: &[bool],
    property: &str,
    step: usize,
    config: &SvmConfig,
    seed: u64,
) -> Result<Hyperplane> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::input(format!("{n} states with {} labels", labels.len())));
    }
    if n < MIN_POINTS {
        return Err(Error::input(format!("hyperplane fit needs at least {MIN_POINTS} points, got {n}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::input("degenerate training set for SVM"));
    }
    if !(config.lambda > 0.0) || config.epochs == 0 {
        return Err(Error::config("SVM needs lambda > 0 and at least one epoch"));
    }
    let d = x.ncols();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let rows: Vec<Vec<f64>> = x
        .rows()
        .into_iter()
        .map(|r| {
            let mut v: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
            v.push(1.0);
            v
        })
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();

    let mut rng = RngStream::new(seed, 0);
    let total = config.epochs * n;
    let avg_from = total / 2;
    let radius = 1.0 / config.lambda.sqrt();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let mut averaged = 0usize;
    for t in 1..=total {
        let i = rng.below(n);
        let eta = 1.0 / (config.lambda * t as f64);
        let violated = y[i] * dot(&w, &rows[i]) < 1.0;
        let decay = 1.0 - eta * config.lambda;
        for v in &mut w {
            *v *= decay;
        }
        if violated {
            for (v, xi) in w.iter_mut().zip(&rows[i]) {
                *v += eta * y[i] * xi;
            }
        }
        let len = norm(&w);
        if len > radius {
            for v in &mut w {
                *v *= radius / len;
            }
        }
        if t > avg_from {
            averaged += 1;
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += v;
            }
        }
    }
    for a in &mut avg {
        *a /= averaged as f64;
    }

    let w_norm = norm(&avg[..d]);
    if !(w_norm > 0.0) || !w_norm.is_finite() {
        return Err(Error::Numerical("SVM normal vanished".into()));
    }
    let normal: Vec<f64> = avg[..d].iter().map(|v| v / w_norm).collect();
    let bias = (avg[d] - dot(&avg[..d], &mean)) / w_norm;
    let distances: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect();
    let hits = distances.iter().zip(labels).filter(|(d, &l)| (**d > 0.0) == l).count();
    let median = |side: bool| {
        let mut v: Vec<f64> = distances.iter().zip(labels).filter(|(_, &l)| l == side).map(|(d, _)| *d).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (pos_center, neg_center) = (median(true), median(false));
    let mut magnitudes: Vec<f64> = distances
        .iter()
        .zip(labels)
        .map(|(&d, &l)| if l { d - neg_center } else { pos_center - d }.max(0.0))
        .collect();
    magnitudes.sort_by(f64::total_cmp);
    let reach = magnitudes[((REACH_QUANTILE * n as f64).ceil() as usize).clamp(1, n) - 1];
    let train_accuracy = hits as f64 / n as f64;
    let warning = (train_accuracy < MIN_ACCURACY).then(|| {
        let msg = format!("hyperplane for `{property}` separates poorly (training accuracy {train_accuracy:.3})");
        log::warn!("{msg}");
        msg
    });
    Ok(Hyperplane {
        property: property.to_string(),
        step,
        normal,
        bias,
        diagnostics: FitDiagnostics {
            points: n,
            positives,
            margin: 1.0 / w_norm,
            reach,
            train_accuracy,
            warning,
        },
    })
}

/// `x + alpha * normal`.
pub fn shift(x: &[f64], hyperplane: &Hyperplane, alpha: f64) -> Result<Vec<f64>> {
    if x.len() != hyperplane.dim() {
        return Err(Error::input(format!(
            "state has {} entries, hyperplane {}",
            x.len(),
            hyperplane.dim()
        )));
    }
    Ok(x.iter().zip(&hyperplane.normal).map(|(v, h)| v + alpha * h).collect())
}

/// Unit vector along `h2 - (h2 . h1) h1`.
pub fn orthogonalize(h1: &[f64], h2: &[f64]) -> Result<Vec<f64>> {
    if h1.len() != h2.len() {
        return Err(Error::input("hyperplanes live in different spaces"));
    }
    let (n1, n2) = (norm(h1), norm(h2));
    if (n1 - 1.0).abs() > 1e-9 || (n2 - 1.0).abs() > 1e-9 {
        return Err(Error::input("orthogonalize expects unit normals"));
    }
    let c = dot(h1, h2);
    if c.abs() > 1.0 - PARALLEL_TOL {
        return Err(Error::input("entangled properties; cannot orthogonalize"));
    }
    let mut out: Vec<f64> = h2.iter().zip(h1).map(|(b, a)| b - c * a).collect();
    // A second pass removes the rounding left by the first.
    let c2 = dot(h1, &out);
    for (o, a) in out.iter_mut().zip(h1) {
        *o -= c2 * a;
    }
    let len = norm(&out);
    for o in &mut out {
        *o /= len;
    }
    Ok(out)
}
