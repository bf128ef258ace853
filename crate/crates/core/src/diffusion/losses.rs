//! Denoising and score-matching objectives.
//!
//! Each objective first draws a [`LossBatch`] (perturbed inputs, regression
//! targets, per-row weights), then scores a prediction against it. All
//! objectives share the form `mean_b w_b |pred_b - target_b|^2`, which keeps
//! them non-negative and exactly zero for an oracle predictor.

use ndarray::{Array2, ArrayView2};

use crate::diffusion::model::DiffusionModel;
use crate::diffusion::schedule::{NoiseSchedule, ScheduleKind, CONTINUOUS_TIME_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::mlp::Gradients;
use crate::numerics::rng::RngStream;
use crate::numerics::PredictionTarget;

/// Anything that maps `(x_t, native t per row)` to a prediction.
pub trait Predictor {
    fn predict(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>>;
}

impl<F> Predictor for F
where
    F: Fn(ArrayView2<f64>, &[f64]) -> Result<Array2<f64>>,
{
    fn predict(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self(x, t)
    }
}

#[derive(Clone, Debug)]
pub struct LossBatch {
    pub x0: Array2<f64>,
    pub x_t: Array2<f64>,
    /// Native time per row.
    pub t: Vec<f64>,
    /// Kernel standard deviation per row.
    pub std: Vec<f64>,
    pub target: Array2<f64>,
    pub weight: Vec<f64>,
}

impl LossBatch {
    pub fn value(&self, pred: &Array2<f64>) -> Result<f64> {
        self.check(pred)?;
        let n = pred.nrows() as f64;
        let mut total = 0.0;
        for (r, (p, y)) in pred.rows().into_iter().zip(self.target.rows()).enumerate() {
            let sq: f64 = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            total += self.weight[r] * sq;
        }
        Ok(total / n)
    }

    /// Gradient of [`Self::value`] with respect to `pred`.
    pub fn grad(&self, pred: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(pred)?;
        let n = pred.nrows() as f64;
        let mut g = pred - &self.target;
        for (r, mut row) in g.rows_mut().into_iter().enumerate() {
            row *= 2.0 * self.weight[r] / n;
        }
        Ok(g)
    }

    fn check(&self, pred: &Array2<f64>) -> Result<()> {
        if pred.dim() != self.target.dim() {
            return Err(Error::input("prediction shape does not match the target"));
        }
        Ok(())
    }
}

fn draw_noise(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut eps = Array2::zeros((rows, cols));
    rng.fill_normal(eps.as_slice_mut().expect("standard layout"));
    eps
}

fn build_batch(
    x0: ArrayView2<f64>,
    t: Vec<f64>,
    kernel: Vec<(f64, f64)>,
    noise_target: bool,
    rng: &mut RngStream,
) -> LossBatch {
    let (rows, cols) = x0.dim();
    let eps = draw_noise(rows, cols, rng);
    let mut x_t = Array2::zeros((rows, cols));
    let mut target = Array2::zeros((rows, cols));
    let mut weight = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let (m, s) = kernel[r];
        for c in 0..cols {
            x_t[[r, c]] = m * x0[[r, c]] + s * eps[[r, c]];
            target[[r, c]] = if noise_target {
                eps[[r, c]]
            } else {
                // grad log q(x_t | x0) = -(x_t - m x0) / s^2 = -eps / s
                -eps[[r, c]] / s
            };
        }
        weight.push(if noise_target { 1.0 } else { s * s });
        std.push(s);
    }
    LossBatch {
        x0: x0.to_owned(),
        x_t,
        t,
        std,
        target,
        weight,
    }
}

fn uniform_steps(rows: usize, schedule: &NoiseSchedule, rng: &mut RngStream) -> Vec<f64> {
    (0..rows)
        .map(|_| (1 + rng.below(schedule.steps())) as f64)
        .collect()
}

/// Noise-prediction batch with `t` uniform over `1..=T` and unit weighting.
pub fn ddpm_batch(x0: ArrayView2<f64>, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<LossBatch> {
    if schedule.kind() != ScheduleKind::VpDiscrete {
        return Err(Error::config("the DDPM objective needs a discrete VP schedule"));
    }
    let t = uniform_steps(x0.nrows(), schedule, rng);
    let kernel = t.iter().map(|&ti| schedule.marginal(ti)).collect::<Result<Vec<_>>>()?;
    Ok(build_batch(x0, t, kernel, true, rng))
}

/// Score-matching batch on a discrete VE schedule, weighting sigma_t^2.
pub fn smld_batch(x0: ArrayView2<f64>, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<LossBatch> {
    if schedule.kind() != ScheduleKind::VeDiscrete {
        return Err(Error::config("the SMLD objective needs a discrete VE schedule"));
    }
    let t = uniform_steps(x0.nrows(), schedule, rng);
    let kernel = t.iter().map(|&ti| schedule.marginal(ti)).collect::<Result<Vec<_>>>()?;
    Ok(build_batch(x0, t, kernel, false, rng))
}

/// Continuous-time score-matching batch with `t` uniform on `(floor, 1]` and
/// weighting equal to the kernel variance.
pub fn ssde_batch(x0: ArrayView2<f64>, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<LossBatch> {
    if schedule.is_discrete() {
        return Err(Error::config("the SDE objective needs a continuous schedule"));
    }
    let t: Vec<f64> = (0..x0.nrows())
        .map(|_| CONTINUOUS_TIME_FLOOR + (1.0 - CONTINUOUS_TIME_FLOOR) * (1.0 - rng.uniform()))
        .collect();
    let kernel = t.iter().map(|&ti| schedule.continuous_marginal(ti)).collect();
    Ok(build_batch(x0, t, kernel, false, rng))
}

/// Draw the objective matching the schedule kind.
pub fn objective_batch(x0: ArrayView2<f64>, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<LossBatch> {
    match schedule.kind() {
        ScheduleKind::VpDiscrete => ddpm_batch(x0, schedule, rng),
        ScheduleKind::VeDiscrete => smld_batch(x0, schedule, rng),
        _ => ssde_batch(x0, schedule, rng),
    }
}

/// Monte Carlo loss of an arbitrary predictor (used with analytic oracles).
pub fn loss_value(predictor: &impl Predictor, batch: &LossBatch) -> Result<f64> {
    let pred = predictor.predict(batch.x_t.view(), &batch.t)?;
    batch.value(&pred)
}

/// Loss and parameter gradients of a model on a drawn batch.
pub fn loss_and_grad(model: &DiffusionModel, batch: &LossBatch) -> Result<(f64, Gradients)> {
    let (raw, cache) = model.net.forward_cached(batch.x_t.view(), &batch.t)?;
    let score_scaled = model.net.target == PredictionTarget::Score;
    let pred = if score_scaled {
        divide_rows(raw, &batch.std)
    } else {
        raw
    };
    let loss = batch.value(&pred)?;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    let mut g = batch.grad(&pred)?;
    if score_scaled {
        g = divide_rows(g, &batch.std);
    }
    let grads = model.net.backward(&cache, g.view())?;
    Ok((loss, grads))
}

pub(crate) fn divide_rows(mut a: Array2<f64>, by: &[f64]) -> Array2<f64> {
    for (mut row, &d) in a.rows_mut().into_iter().zip(by) {
        row /= d;
    }
    a
}

/// Eq.-1 style noise-prediction loss and gradients.
pub fn ddpm_loss(model: &DiffusionModel, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<(f64, Gradients)> {
    if model.net.target != PredictionTarget::Noise {
        return Err(Error::config("the DDPM objective needs a noise-predicting network"));
    }
    let batch = ddpm_batch(x0, &model.schedule, rng)?;
    loss_and_grad(model, &batch)
}

/// Discrete VE score-matching loss and gradients.
pub fn smld_loss(model: &DiffusionModel, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<(f64, Gradients)> {
    if model.net.target != PredictionTarget::Score {
        return Err(Error::config("the SMLD objective needs a score network"));
    }
    let batch = smld_batch(x0, &model.schedule, rng)?;
    loss_and_grad(model, &batch)
}

/// Continuous-time score-matching loss and gradients.
pub fn ssde_loss(model: &DiffusionModel, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<(f64, Gradients)> {
    if model.net.target != PredictionTarget::Score {
        return Err(Error::config("the SDE objective needs a score network"));
    }
    let batch = ssde_batch(x0, &model.schedule, rng)?;
    loss_and_grad(model, &batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn gaussian_data(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, 99);
        let mut x = Array2::zeros((n, 2));
        for mut row in x.rows_mut() {
            row[0] = 1.0 + 0.5 * rng.normal();
            row[1] = -0.5 + 0.8 * rng.normal();
        }
        x
    }

    #[test]
    fn oracle_predictors_have_zero_loss() {
        let x0 = gaussian_data(256, 1);
        let mut rng = RngStream::new(2, 0);
        for kind in [
            ScheduleKind::VpDiscrete,
            ScheduleKind::VeDiscrete,
            ScheduleKind::VpContinuous,
            ScheduleKind::VeContinuous,
        ] {
            let s = NoiseSchedule::new(kind, 1000).unwrap();
            let batch = objective_batch(x0.view(), &s, &mut rng).unwrap();
            let target = batch.target.clone();
            let oracle = move |_x: ArrayView2<f64>, _t: &[f64]| Ok(target.clone());
            assert_eq!(loss_value(&oracle, &batch).unwrap(), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn score_oracle_from_definition() {
        // -(x_t - x0) / sigma_t^2 recomputed from the perturbed batch
        let x0 = gaussian_data(128, 3);
        let s = NoiseSchedule::new(ScheduleKind::VeDiscrete, 1000).unwrap();
        let mut rng = RngStream::new(4, 0);
        let batch = smld_batch(x0.view(), &s, &mut rng).unwrap();
        let mut oracle = Array2::zeros(batch.x_t.dim());
        for r in 0..oracle.nrows() {
            let sigma = s.ve_sigma(batch.t[r]).unwrap();
            for c in 0..2 {
                oracle[[r, c]] = -(batch.x_t[[r, c]] - batch.x0[[r, c]]) / (sigma * sigma);
            }
        }
        assert!(batch.value(&oracle).unwrap() < 1e-18);
    }

    #[test]
    fn zero_predictor_loss_is_dimension() {
        let x0 = gaussian_data(10_000, 5);
        let zero = |x: ArrayView2<f64>, _t: &[f64]| Ok(Array2::zeros(x.dim()));
        for kind in [ScheduleKind::VpDiscrete, ScheduleKind::VeDiscrete] {
            let s = NoiseSchedule::new(kind, 1000).unwrap();
            let mut rng = RngStream::new(6, 0);
            let batch = objective_batch(x0.view(), &s, &mut rng).unwrap();
            let l = loss_value(&zero, &batch).unwrap();
            assert!((l - 2.0).abs() < 0.1, "{kind:?}: {l}");
        }
    }

    #[test]
    fn wrong_schedule_rejected() {
        let x0 = gaussian_data(8, 5);
        let s = NoiseSchedule::new(ScheduleKind::VeDiscrete, 10).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(ddpm_batch(x0.view(), &s, &mut rng).is_err());
        assert!(ssde_batch(x0.view(), &s, &mut rng).is_err());
    }
}
