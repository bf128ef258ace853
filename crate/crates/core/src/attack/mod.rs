//! Property inference: estimate a property's proportion from generated
//! samples as the fraction of samples that satisfy it.

pub mod predicate;

pub use predicate::{PredicateKind, PropertyPredicate, Samples};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p̂ = ΣP / m`.
pub fn infer_proportion(samples: Samples<'_>, predicate: &PropertyPredicate) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("cannot infer a proportion from zero samples"));
    }
    let hits = predicate.evaluate(samples)?;
    Ok(fraction(&hits))
}

fn fraction(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

pub fn abs_difference(estimate: f64, reference: f64) -> f64 {
    (estimate - reference).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub predicate: String,
    pub real: Option<f64>,
    pub inferred: f64,
    pub abs_difference: Option<f64>,
    pub m: usize,
    pub sampler: String,
    pub model: String,
}

impl AttackReport {
    pub fn new(
        samples: Samples<'_>,
        predicate: &PropertyPredicate,
        real: Option<f64>,
        sampler: &str,
        model: &str,
    ) -> Result<Self> {
        let inferred = infer_proportion(samples, predicate)?;
        Ok(Self {
            predicate: predicate.id.clone(),
            real,
            inferred,
            abs_difference: real.map(|p| abs_difference(inferred, p)),
            m: samples.len(),
            sampler: sampler.to_string(),
            model: model.to_string(),
        })
    }
}

/// Estimates at each count over nested prefixes of one generated stream,
/// so every larger count extends the smaller ones.
pub fn stability_curve(
    samples: Samples<'_>,
    predicate: &PropertyPredicate,
    counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("stability counts must be strictly ascending"));
    }
    if counts.first() == Some(&0) {
        return Err(Error::input("stability counts must be positive"));
    }
    if let Some(&last) = counts.last() {
        if last > samples.len() {
            return Err(Error::input(format!(
                "stability count {last} exceeds the {} generated samples",
                samples.len()
            )));
        }
    }
    let hits = predicate.evaluate(samples)?;
    let mut curve = Vec::with_capacity(counts.len());
    let mut running = 0usize;
    let mut seen = 0usize;
    for &m in counts {
        running += hits[seen..m].iter().filter(|&&h| h).count();
        seen = m;
        curve.push((m, running as f64 / m as f64));
    }
    Ok(curve)
}

/// Spread of the estimate across independent runs at each count, and the
/// least-squares slope of log spread against log count. Every curve must
/// share the same counts.
pub fn fluctuation(curves: &[Vec<(usize, f64)>]) -> Result<(Vec<(usize, f64)>, f64)> {
    if curves.len() < 2 {
        return Err(Error::input("fluctuation needs at least two runs"));
    }
    let counts: Vec<usize> = curves[0].iter().map(|&(m, _)| m).collect();
    if counts.len() < 2 || curves.iter().any(|c| c.iter().map(|&(m, _)| m).ne(counts.iter().copied())) {
        return Err(Error::input("fluctuation needs two or more counts shared by every run"));
    }
    let runs = curves.len() as f64;
    let spread: Vec<(usize, f64)> = counts
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let mean = curves.iter().map(|c| c[i].1).sum::<f64>() / runs;
            let var = curves.iter().map(|c| (c[i].1 - mean).powi(2)).sum::<f64>() / (runs - 1.0);
            (m, var.sqrt())
        })
        .collect();
    if spread.iter().any(|&(_, s)| s <= 0.0) {
        return Err(Error::Numerical("zero spread at some count; slope undefined".into()));
    }
    let xs: Vec<f64> = spread.iter().map(|&(m, _)| (m as f64).ln()).collect();
    let ys: Vec<f64> = spread.iter().map(|&(_, s)| s.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok((spread, sxy / sxx))
}
