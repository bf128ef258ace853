use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::synthetic::apportion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balanced {
    /// Indices of the kept samples, ascending.
    pub retained: Vec<usize>,
    pub drop_fraction: f64,
}

/// Drop samples until every binary property sits at its target. Targets are
/// met jointly: each of the `2^n` membership cells is cut to the largest
/// common size that realizes the product of the targets, keeping the
/// earliest samples in each cell.
pub fn drop_balance_baseline(memberships: &[Vec<bool>], gammas: &[f64]) -> Result<Balanced> {
    if memberships.is_empty() || memberships.len() != gammas.len() {
        return Err(Error::input("one target per property is required"));
    }
    let m = memberships[0].len();
    if m == 0 {
        return Err(Error::input("cannot balance zero samples"));
    }
    if memberships.iter().any(|v| v.len() != m) {
        return Err(Error::input("membership vectors differ in length"));
    }
    if gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
        return Err(Error::input("targets must lie in (0, 1)"));
    }
    let n = memberships.len();
    if n > 16 {
        return Err(Error::input("too many jointly balanced properties"));
    }
    let cells = 1usize << n;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for r in 0..m {
        let cell = memberships.iter().enumerate().fold(0, |acc, (i, v)| acc | ((v[r] as usize) << i));
        members[cell].push(r);
    }
    let target: Vec<f64> = (0..cells)
        .map(|c| (0..n).map(|i| if c >> i & 1 == 1 { gammas[i] } else { 1.0 - gammas[i] }).product())
        .collect();
    let mut keep = f64::INFINITY;
    for c in 0..cells {
        if members[c].is_empty() {
            return Err(Error::input("cannot balance: a property side has no samples"));
        }
        keep = keep.min(members[c].len() as f64 / target[c]);
    }
    let total = (keep.floor() as usize).min(m);
    let mut counts = apportion(&target, total);
    // Rounding may ask one more than a cell holds; give that row back.
    for (count, list) in counts.iter_mut().zip(&members) {
        *count = (*count).min(list.len());
    }
    let mut retained: Vec<usize> = members
        .iter()
        .zip(&counts)
        .flat_map(|(list, &k)| list[..k].iter().copied())
        .collect();
    retained.sort_unstable();
    let drop_fraction = 1.0 - retained.len() as f64 / m as f64;
    Ok(Balanced {
        retained,
        drop_fraction,
    })
}

/// `1 - 2^n prod(p)`: the most a drop defense can discard for independent
/// binary properties with minority proportions `p`.
pub fn worst_case_drop_bound(proportions: &[f64]) -> Result<f64> {
    if proportions.is_empty() {
        return Err(Error::input("no proportions"));
    }
    for &p in proportions {
        if !(p > 0.0 && p < 0.5) {
            return Err(Error::input(format!("proportion {p} outside (0, 0.5)")));
        }
    }
    let n = proportions.len() as i32;
    Ok(1.0 - 2f64.powi(n) * proportions.iter().product::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn bernoulli(m: usize, p: f64, rng: &mut RngStream) -> Vec<bool> {
        (0..m).map(|_| rng.uniform() < p).collect()
    }

    fn fraction(v: &[bool], idx: &[usize]) -> f64 {
        idx.iter().filter(|&&i| v[i]).count() as f64 / idx.len() as f64
    }

    #[test]
    fn bound_values() {
        assert!((worst_case_drop_bound(&[0.10]).unwrap() - 0.80).abs() < 1e-12);
        assert!((worst_case_drop_bound(&[0.3, 0.4]).unwrap() - 0.52).abs() < 1e-12);
        assert!(worst_case_drop_bound(&[0.5 - 1e-9]).unwrap() < 1e-8);
        assert!(worst_case_drop_bound(&[0.5]).is_err());
        assert!(worst_case_drop_bound(&[0.0]).is_err());
    }

    #[test]
    fn balanced_input_drops_nothing() {
        let v: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let b = drop_balance_baseline(&[v], &[0.5]).unwrap();
        assert_eq!(b.drop_fraction, 0.0);
        assert_eq!(b.retained.len(), 100);
    }

    #[test]
    fn single_property_worked_case() {
        let mut rng = RngStream::new(1, 0);
        let v = bernoulli(50_000, 0.10, &mut rng);
        let b = drop_balance_baseline(std::slice::from_ref(&v), &[0.5]).unwrap();
        assert!((b.drop_fraction - 0.80).abs() <= 0.02);
        assert!((fraction(&v, &b.retained) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn two_independent_properties() {
        let mut rng = RngStream::new(2, 0);
        let a = bernoulli(50_000, 0.3, &mut rng);
        let c = bernoulli(50_000, 0.4, &mut rng);
        let b = drop_balance_baseline(&[a.clone(), c.clone()], &[0.5, 0.5]).unwrap();
        let bound = worst_case_drop_bound(&[0.3, 0.4]).unwrap();
        assert!(b.drop_fraction <= bound + 0.02);
        assert!((b.drop_fraction - bound).abs() <= 0.02);
        assert!((fraction(&a, &b.retained) - 0.5).abs() < 1e-3);
        assert!((fraction(&c, &b.retained) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn empty_side_fails() {
        let err = drop_balance_baseline(&[vec![true; 10]], &[0.5]).unwrap_err();
        assert!(err.to_string().contains("cannot balance"));
        assert!(drop_balance_baseline(&[vec![]], &[0.5]).is_err());
    }
}
