use ndarray::Array2;

use crate::error::{Error, Result};
use crate::samplers::{by_chunks, fill_noise, intercept, prior_chunk, SamplerConfig, ScoreModel, StepInterceptor};

/// DDPM reverse chain over an evenly strided subsequence of the discrete
/// steps. With `n_steps = T` this is the standard ancestral sampler; with
/// fewer steps the per-step betas are respaced from the cumulative products.
/// `n_steps = 0` returns the prior draws.
pub fn ancestral_sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    m: usize,
    interceptor: Option<&dyn StepInterceptor>,
    seed: u64,
) -> Result<Array2<f64>> {
    let schedule = model.schedule();
    if !schedule.is_vp() {
        return Err(Error::config("ancestral sampling needs a VP schedule"));
    }
    let n = config.n_steps;
    let grid = schedule.grid(n)?;
    let dim = model.dim();
    by_chunks(m, dim, |offset, rows| {
        let (mut x, mut rngs) = prior_chunk(schedule, dim, offset, rows, seed);
        intercept(interceptor, n, &mut x, offset);
        let mut z = Array2::zeros((rows, dim));
        for k in (1..=n).rev() {
            let (tau, tau_prev) = (grid[k], grid[k - 1]);
            let ab = schedule.marginal_tau(tau).0.powi(2);
            let ab_prev = schedule.marginal_tau(tau_prev).0.powi(2);
            let beta = 1.0 - ab / ab_prev;
            let eps = model.noise(x.view(), tau)?;
            let coef = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / (1.0 - beta).sqrt();
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            x.zip_mut_with(&eps, |xv, &e| *xv = (*xv - coef * e) * inv);
            if var > 0.0 {
                fill_noise(&mut z, &mut rngs);
                x.scaled_add(var.sqrt(), &z);
            }
            intercept(interceptor, k - 1, &mut x, offset);
        }
        Ok(x)
    })
}
