use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::samplers::ScoreModel;

/// Exact score of the perturbed marginals of a Gaussian data distribution
/// `N(mean, cov)`: the kernel maps it to `N(a mean, a^2 cov + s^2 I)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>, schedule: NoiseSchedule) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::input("covariance must be a square matrix matching the mean"));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if cov.clone().cholesky().is_none() {
            return Err(Error::input("covariance is not positive definite"));
        }
        Ok(Self {
            mean,
            cov,
            schedule,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

impl ScoreModel for GaussianOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::input("oracle dimension mismatch"));
        }
        let (a, s) = self.schedule.marginal_tau(tau);
        let c = &self.cov * (a * a) + DMatrix::identity(d, d) * (s * s);
        let prec = c
            .cholesky()
            .ok_or_else(|| Error::Numerical("oracle covariance lost definiteness".into()))?
            .inverse();
        let mut out = Array2::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += prec[(i, j)] * (row[j] - a * self.mean[j]);
                }
                out[[r, i]] = -acc;
            }
        }
        Ok(out)
    }
}
