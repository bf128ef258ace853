//! Gradient-boosted depth-limited trees on quantile-binned features, with a
//! logistic loss for two classes and a softmax over one tree per class
//! otherwise. Leaves take a Newton step.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BoostConfig {
    pub rounds: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub bins: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            depth: 2,
            learning_rate: 0.1,
            l2: 1.0,
            bins: 32,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        /// Rows with bin index `<= bin` go left.
        bin: u8,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn eval(&self, row: &[u8]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, bin, left, right } => {
                if row[*feature] <= *bin {
                    left.eval(row)
                } else {
                    right.eval(row)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Booster {
    /// Upper bin edges per feature.
    edges: Vec<Vec<f64>>,
    classes: usize,
    base: Vec<f64>,
    /// One tree per class per round (a single tree per round for two classes).
    trees: Vec<Vec<Node>>,
    learning_rate: f64,
}

fn quantile_edges(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..bins)
        .map(|i| values[(i * values.len() / bins).min(values.len() - 1)])
        .collect();
    edges.dedup();
    edges
}

fn bin_of(edges: &[f64], v: f64) -> u8 {
    edges.partition_point(|&e| e < v) as u8
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

struct Grower<'a> {
    binned: &'a [Vec<u8>],
    n_bins: Vec<usize>,
    grad: &'a [f64],
    hess: &'a [f64],
    l2: f64,
}

impl Grower<'_> {
    fn leaf(&self, rows: &[usize]) -> f64 {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        -g / (h + self.l2)
    }

    fn grow(&self, rows: &[usize], depth: usize) -> Node {
        if depth == 0 || rows.len() < 2 {
            return Node::Leaf(self.leaf(rows));
        }
        let g_total: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h_total: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let parent = g_total * g_total / (h_total + self.l2);
        let mut best: Option<(f64, usize, u8)> = None;
        for (f, &nb) in self.n_bins.iter().enumerate() {
            if nb < 2 {
                continue;
            }
            let mut gh = vec![(0.0, 0.0); nb];
            for &r in rows {
                let b = self.binned[r][f] as usize;
                gh[b].0 += self.grad[r];
                gh[b].1 += self.hess[r];
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for (b, &(g, h)) in gh.iter().enumerate().take(nb - 1) {
                gl += g;
                hl += h;
                let (gr, hr) = (g_total - gl, h_total - hl);
                if hl <= 1e-12 || hr <= 1e-12 {
                    continue;
                }
                let gain = gl * gl / (hl + self.l2) + gr * gr / (hr + self.l2) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b as u8));
                }
            }
        }
        match best {
            None => Node::Leaf(self.leaf(rows)),
            Some((_, feature, bin)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| self.binned[r][feature] <= bin);
                Node::Split {
                    feature,
                    bin,
                    left: Box::new(self.grow(&l, depth - 1)),
                    right: Box::new(self.grow(&r, depth - 1)),
                }
            }
        }
    }
}

impl Booster {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], classes: usize, config: &BoostConfig) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || y.len() != n {
            return Err(Error::input("boosting needs one label per row"));
        }
        if classes < 2 || y.iter().any(|&c| c >= classes) {
            return Err(Error::input("labels must index at least two classes"));
        }
        let bins = config.bins.clamp(2, 255);
        let edges: Vec<Vec<f64>> = (0..x.ncols())
            .map(|j| quantile_edges(&mut x.column(j).to_vec(), bins))
            .collect();
        let binned: Vec<Vec<u8>> = x
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&edges).map(|(&v, e)| bin_of(e, v)).collect())
            .collect();
        let n_bins: Vec<usize> = edges.iter().map(|e| e.len() + 1).collect();

        let outputs = if classes == 2 { 1 } else { classes };
        let mut counts = vec![0usize; classes];
        for &c in y {
            counts[c] += 1;
        }
        let prior = |c: usize| (counts[c].max(1) as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let base: Vec<f64> = if outputs == 1 {
            vec![(prior(1) / (1.0 - prior(1))).ln()]
        } else {
            (0..classes).map(|c| prior(c).ln()).collect()
        };

        let mut score: Vec<Vec<f64>> = vec![base.clone(); n];
        let mut trees = Vec::with_capacity(config.rounds);
        let rows: Vec<usize> = (0..n).collect();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..config.rounds {
            let probs: Vec<Vec<f64>> = score
                .iter()
                .map(|s| {
                    if outputs == 1 {
                        vec![1.0 / (1.0 + (-s[0]).exp())]
                    } else {
                        let mut p = s.clone();
                        softmax_in_place(&mut p);
                        p
                    }
                })
                .collect();
            let mut round = Vec::with_capacity(outputs);
            for k in 0..outputs {
                for r in 0..n {
                    let target = if outputs == 1 { (y[r] == 1) as u8 as f64 } else { (y[r] == k) as u8 as f64 };
                    let p = probs[r][k];
                    grad[r] = p - target;
                    hess[r] = (p * (1.0 - p)).max(1e-12);
                }
                let grower = Grower {
                    binned: &binned,
                    n_bins: n_bins.clone(),
                    grad: &grad,
                    hess: &hess,
                    l2: config.l2,
                };
                let tree = grower.grow(&rows, config.depth);
                for r in 0..n {
                    score[r][k] += config.learning_rate * tree.eval(&binned[r]);
                }
                round.push(tree);
            }
            trees.push(round);
        }
        Ok(Self {
            edges,
            classes,
            base,
            trees,
            learning_rate: config.learning_rate,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        if x.ncols() != self.edges.len() {
            return Err(Error::input("feature count differs from the fitted booster"));
        }
        Ok(x
            .rows()
            .into_iter()
            .map(|r| {
                let binned: Vec<u8> = r.iter().zip(&self.edges).map(|(&v, e)| bin_of(e, v)).collect();
                let mut s = self.base.clone();
                for round in &self.trees {
                    for (k, t) in round.iter().enumerate() {
                        s[k] += self.learning_rate * t.eval(&binned);
                    }
                }
                if self.classes == 2 {
                    (s[0] > 0.0) as usize
                } else {
                    s.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                        .0
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use ndarray::Array2;

    #[test]
    fn learns_an_interaction() {
        let mut rng = RngStream::new(1, 0);
        let x = Array2::from_shape_fn((2000, 3), |_| rng.uniform() * 2.0 - 1.0);
        let y: Vec<usize> = x.rows().into_iter().map(|r| ((r[0] > 0.0) ^ (r[1] > 0.3)) as usize).collect();
        let b = Booster::fit(x.view(), &y, 2, &BoostConfig::default()).unwrap();
        let p = b.predict(x.view()).unwrap();
        let acc = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 2000.0;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn multiclass_thresholds() {
        let mut rng = RngStream::new(2, 0);
        let x = Array2::from_shape_fn((1500, 1), |_| rng.uniform());
        let y: Vec<usize> = x.column(0).iter().map(|&v| (v * 3.0) as usize).collect();
        let b = Booster::fit(x.view(), &y, 3, &BoostConfig::default()).unwrap();
        let p = b.predict(x.view()).unwrap();
        let acc = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 1500.0;
        assert!(acc > 0.95);
    }

    #[test]
    fn single_class_predicts_that_class() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i * 2 + j) as f64);
        let b = Booster::fit(x.view(), &[1; 50], 2, &BoostConfig::default()).unwrap();
        assert!(b.predict(x.view()).unwrap().iter().all(|&c| c == 1));
    }
}
