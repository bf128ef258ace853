use ndarray::{s, Array2, ArrayView2};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::samplers::{intercept, prior_noise, SamplerConfig, ScoreModel, StepInterceptor, CHUNK};

/// Per-step solver orders, first step first, spending exactly `steps` model
/// evaluations.
pub fn dpm_orders(steps: usize, order: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("DPM sampling needs at least one step"));
    }
    Ok(match order {
        1 => vec![1; steps],
        2 => {
            if steps % 2 == 0 {
                vec![2; steps / 2]
            } else {
                let mut v = vec![2; steps / 2];
                v.push(1);
                v
            }
        }
        3 => {
            let outer = steps / 3 + 1;
            if steps % 3 == 0 {
                let mut v = vec![3; outer - 2];
                v.extend([2, 1]);
                v
            } else {
                let mut v = vec![3; outer - 1];
                v.push(steps % 3);
                v
            }
        }
        _ => return Err(Error::config("dpm_order must be 1, 2 or 3")),
    })
}

/// Outer time grid, uniform in log-SNR, as ascending normalized times
/// `tau_0 = end < ... < tau_K = 1`, together with the per-step orders.
pub fn dpm_grid(schedule: &NoiseSchedule, steps: usize, order: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if !schedule.is_vp() {
        return Err(Error::config("DPM sampling needs a VP schedule"));
    }
    let orders = dpm_orders(steps, order)?;
    let outer = orders.len();
    let end = schedule.ode_end();
    let (lambda_end, lambda_start) = (schedule.log_snr(end), schedule.log_snr(1.0));
    let mut taus: Vec<f64> = (0..=outer)
        .map(|k| {
            let lambda = lambda_end + (lambda_start - lambda_end) * k as f64 / outer as f64;
            schedule.tau_from_log_snr(lambda)
        })
        .collect();
    taus[0] = end;
    taus[outer] = 1.0;
    Ok((taus, orders))
}

/// Singlestep DPM-Solver from fresh prior noise.
pub fn dpm_sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    m: usize,
    interceptor: Option<&dyn StepInterceptor>,
    seed: u64,
) -> Result<Array2<f64>> {
    let x = prior_noise(model.schedule(), model.dim(), m, seed);
    dpm_sample_from(model, config, x.view(), interceptor)
}

/// Singlestep DPM-Solver with noise prediction, starting from `x_init`.
/// Interceptor indices address the outer grid returned by [`dpm_grid`].
pub fn dpm_sample_from(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    x_init: ArrayView2<f64>,
    interceptor: Option<&dyn StepInterceptor>,
) -> Result<Array2<f64>> {
    config.validate()?;
    let schedule = model.schedule();
    let (taus, orders) = dpm_grid(schedule, config.n_steps, config.dpm_order)?;
    if x_init.ncols() != model.dim() {
        return Err(Error::input("initial state dimension does not match the model"));
    }
    let outer = orders.len();
    let m = x_init.nrows();
    let mut out = Array2::zeros(x_init.dim());
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let mut x = x_init.slice(s![start..start + rows, ..]).to_owned();
        intercept(interceptor, outer, &mut x, start);
        for (i, &order) in orders.iter().enumerate() {
            let k = outer - i;
            x = match order {
                1 => first_order(model, &x, taus[k], taus[k - 1])?,
                2 => second_order(model, &x, taus[k], taus[k - 1])?,
                _ => third_order(model, &x, taus[k], taus[k - 1])?,
            };
            intercept(interceptor, k - 1, &mut x, start);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                time: taus[0],
                reason: "state became non-finite".into(),
            });
        }
        out.slice_mut(s![start..start + rows, ..]).assign(&x);
        start += rows;
    }
    Ok(out)
}

struct Point {
    tau: f64,
    alpha: f64,
    sigma: f64,
    lambda: f64,
}

fn point(schedule: &NoiseSchedule, tau: f64) -> Point {
    let (alpha, sigma) = schedule.continuous_marginal(tau);
    Point {
        tau,
        alpha,
        sigma,
        lambda: alpha.ln() - sigma.ln(),
    }
}

fn point_at_lambda(schedule: &NoiseSchedule, lambda: f64) -> Point {
    point(schedule, schedule.tau_from_log_snr(lambda))
}

/// `a x - b eps`.
fn combine(x: &Array2<f64>, a: f64, eps: &Array2<f64>, b: f64) -> Array2<f64> {
    let mut out = x * a;
    out.scaled_add(-b, eps);
    out
}

fn first_order(model: &dyn ScoreModel, x: &Array2<f64>, from: f64, to: f64) -> Result<Array2<f64>> {
    let sch = model.schedule();
    let (s, t) = (point(sch, from), point(sch, to));
    let h = t.lambda - s.lambda;
    let eps = model.noise(x.view(), s.tau)?;
    Ok(combine(x, t.alpha / s.alpha, &eps, t.sigma * h.exp_m1()))
}

fn second_order(model: &dyn ScoreModel, x: &Array2<f64>, from: f64, to: f64) -> Result<Array2<f64>> {
    let r1 = 0.5;
    let sch = model.schedule();
    let (s, t) = (point(sch, from), point(sch, to));
    let h = t.lambda - s.lambda;
    let s1 = point_at_lambda(sch, s.lambda + r1 * h);
    let eps_s = model.noise(x.view(), s.tau)?;
    let u = combine(x, s1.alpha / s.alpha, &eps_s, s1.sigma * (r1 * h).exp_m1());
    let eps_s1 = model.noise(u.view(), s1.tau)?;
    let phi1 = h.exp_m1();
    let mut out = combine(x, t.alpha / s.alpha, &eps_s, t.sigma * phi1);
    let c = t.sigma / (2.0 * r1) * phi1;
    out.scaled_add(-c, &(&eps_s1 - &eps_s));
    Ok(out)
}

fn third_order(model: &dyn ScoreModel, x: &Array2<f64>, from: f64, to: f64) -> Result<Array2<f64>> {
    let (r1, r2) = (1.0 / 3.0, 2.0 / 3.0);
    let sch = model.schedule();
    let (s, t) = (point(sch, from), point(sch, to));
    let h = t.lambda - s.lambda;
    let s1 = point_at_lambda(sch, s.lambda + r1 * h);
    let s2 = point_at_lambda(sch, s.lambda + r2 * h);
    let phi11 = (r1 * h).exp_m1();
    let phi12 = (r2 * h).exp_m1();
    let phi1 = h.exp_m1();
    let phi22 = (r2 * h).exp_m1() / (r2 * h) - 1.0;
    let phi2 = phi1 / h - 1.0;

    let eps_s = model.noise(x.view(), s.tau)?;
    let u1 = combine(x, s1.alpha / s.alpha, &eps_s, s1.sigma * phi11);
    let eps_s1 = model.noise(u1.view(), s1.tau)?;
    let mut u2 = combine(x, s2.alpha / s.alpha, &eps_s, s2.sigma * phi12);
    u2.scaled_add(-(r2 / r1) * s2.sigma * phi22, &(&eps_s1 - &eps_s));
    let eps_s2 = model.noise(u2.view(), s2.tau)?;
    let mut out = combine(x, t.alpha / s.alpha, &eps_s, t.sigma * phi1);
    out.scaled_add(-(1.0 / r2) * t.sigma * phi2, &(&eps_s2 - &eps_s));
    Ok(out)
}
