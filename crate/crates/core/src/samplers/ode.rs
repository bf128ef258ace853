use ndarray::{s, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::samplers::{intercept, prior_noise, ScoreModel, SamplerConfig, StepInterceptor, CHUNK};

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const MIN_STEP: f64 = 1e-12;

/// Probability-flow ODE sampling from fresh prior noise.
pub fn ode_sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    m: usize,
    interceptor: Option<&dyn StepInterceptor>,
    seed: u64,
) -> Result<Array2<f64>> {
    let x = prior_noise(model.schedule(), model.dim(), m, seed);
    ode_sample_from(model, config, x.view(), interceptor)
}

/// Integrate the probability-flow ODE from `tau = 1` down to the schedule's
/// ODE end time with adaptive Dormand-Prince steps, starting from `x_init`.
///
/// `config.n_steps` only defines the grid the interceptor addresses: grid
/// index `k` fires on the first accepted step that reaches `tau_k`, and any
/// index not yet reached fires at the end.
pub fn ode_sample_from(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    x_init: ArrayView2<f64>,
    interceptor: Option<&dyn StepInterceptor>,
) -> Result<Array2<f64>> {
    config.validate()?;
    if x_init.ncols() != model.dim() {
        return Err(Error::input("initial state dimension does not match the model"));
    }
    let grid = model.schedule().grid(config.n_steps)?;
    let m = x_init.nrows();
    let mut out = Array2::zeros(x_init.dim());
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let x0 = x_init.slice(s![start..start + rows, ..]).to_owned();
        let x = integrate_chunk(model, config, &grid, x0, interceptor, start)?;
        out.slice_mut(s![start..start + rows, ..]).assign(&x);
        start += rows;
    }
    Ok(out)
}

fn drift(model: &dyn ScoreModel, x: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    let (f, g2) = model.schedule().sde_coeffs(tau);
    let mut d = model.score(x.view(), tau)?;
    Zip::from(&mut d).and(x).for_each(|d, &xv| *d = f * xv - 0.5 * g2 * *d);
    Ok(d)
}

fn integrate_chunk(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    grid: &[f64],
    mut x: Array2<f64>,
    interceptor: Option<&dyn StepInterceptor>,
    offset: usize,
) -> Result<Array2<f64>> {
    let end = model.schedule().ode_end();
    let n = grid.len() - 1;
    intercept(interceptor, n, &mut x, offset);
    // Next grid index still waiting to fire.
    let mut pending = n as isize - 1;
    let mut tau = 1.0;
    let mut h = -(1.0 - end).min(0.05);
    let mut k = Vec::with_capacity(7);
    k.push(drift(model, &x, tau)?);
    let (rtol, atol) = (config.ode_rtol, config.ode_atol);

    while tau > end {
        if tau + h < end {
            h = end - tau;
        }
        if h.abs() < MIN_STEP {
            return Err(Error::Solver {
                time: tau,
                reason: "step size underflow".into(),
            });
        }
        k.truncate(1);
        let mut y_new = x.clone();
        for stage in 1..7 {
            let mut ys = x.clone();
            for (j, &a) in A[stage].iter().enumerate() {
                if a != 0.0 {
                    ys.scaled_add(h * a, &k[j]);
                }
            }
            let ks = drift(model, &ys, tau + C[stage] * h)?;
            k.push(ks);
            if stage == 6 {
                y_new = ys;
            }
        }
        let mut err_sq = 0.0;
        let mut finite = true;
        Zip::from(&x).and(&y_new).for_each(|&a, &b| finite &= b.is_finite() && a.is_finite());
        if finite {
            let mut idx = 0;
            for ((&y0, &y1), e) in x.iter().zip(y_new.iter()).zip(error_estimate(&k, h).iter()) {
                let scale = atol + rtol * y0.abs().max(y1.abs());
                err_sq += (e / scale).powi(2);
                idx += 1;
            }
            err_sq /= idx.max(1) as f64;
        }
        let err = if finite { err_sq.sqrt() } else { f64::INFINITY };

        if err <= 1.0 {
            tau += h;
            if tau - end < 1e-15 {
                tau = end;
            }
            x = y_new;
            let fsal = k.pop().expect("seven stages");
            let mut fired = false;
            while pending >= 0 && tau <= grid[pending as usize] {
                intercept(interceptor, pending as usize, &mut x, offset);
                fired |= interceptor.is_some_and(|i| i.target_steps().contains(&(pending as usize)));
                pending -= 1;
            }
            k.clear();
            k.push(if fired { drift(model, &x, tau)? } else { fsal });
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
        } else {
            let factor = if err.is_finite() {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0)
            } else {
                MIN_FACTOR
            };
            h *= factor;
        }
    }
    while pending >= 0 {
        intercept(interceptor, pending as usize, &mut x, offset);
        pending -= 1;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver {
            time: tau,
            reason: "state became non-finite".into(),
        });
    }
    Ok(x)
}

fn error_estimate(k: &[Array2<f64>], h: f64) -> Array2<f64> {
    let mut e = Array2::zeros(k[0].dim());
    for (ki, &w) in k.iter().zip(E.iter()) {
        if w != 0.0 {
            e.scaled_add(h * w, ki);
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use crate::samplers::test_support::{moments, Counting};
    use crate::samplers::GaussianOracle;

    // VE priors ignore the data mean, so VE oracles are centered to keep the
    // prior mismatch below the tolerances under test.
    fn oracle(kind: ScheduleKind) -> GaussianOracle {
        let s = NoiseSchedule::new(kind, 1000).unwrap();
        let mean = if kind.is_vp() { vec![1.0, -0.5] } else { vec![0.0, 0.0] };
        GaussianOracle::new(mean, vec![vec![0.5, 0.2], vec![0.2, 0.3]], s).unwrap()
    }

    #[test]
    fn recovers_gaussian() {
        for kind in [ScheduleKind::VpContinuous, ScheduleKind::VpDiscrete, ScheduleKind::VeContinuous] {
            let o = oracle(kind);
            let x = ode_sample(&o, &SamplerConfig::ode(100), 10_000, None, 2).unwrap();
            let (mean, cov) = moments(&x);
            let want = o.mean();
            assert!((mean[0] - want[0]).abs() < 0.05 && (mean[1] - want[1]).abs() < 0.05, "{kind:?} {mean:?}");
            let target = [[0.5, 0.2], [0.2, 0.3]];
            let fro: f64 = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| (cov[[i, j]] - target[i][j]).powi(2))
                .sum();
            assert!(fro.sqrt() < 0.1, "{kind:?} {cov:?}");
        }
    }

    #[test]
    fn halving_tolerance_changes_little() {
        let o = oracle(ScheduleKind::VpContinuous);
        let x0 = prior_noise(o.schedule(), 2, 200, 9);
        let a = ode_sample_from(&o, &SamplerConfig::ode(10), x0.view(), None).unwrap();
        let mut cfg = SamplerConfig::ode(10);
        cfg.ode_rtol /= 2.0;
        cfg.ode_atol /= 2.0;
        let b = ode_sample_from(&o, &cfg, x0.view(), None).unwrap();
        let diff = (&a - &b).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(diff < 1e-3, "diff {diff}");
    }

    #[test]
    fn deterministic_given_noise() {
        let o = oracle(ScheduleKind::VeContinuous);
        let a = ode_sample(&o, &SamplerConfig::ode(10), 30, None, 1).unwrap();
        let b = ode_sample(&o, &SamplerConfig::ode(10), 30, None, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_interceptor_is_neutral_and_counted() {
        let o = oracle(ScheduleKind::VpContinuous);
        let cfg = SamplerConfig::ode(50);
        let plain = ode_sample(&o, &cfg, 1100, None, 4).unwrap();
        let hook = Counting::new(&[0, 7, 49, 50], 1100);
        let hooked = ode_sample(&o, &cfg, 1100, Some(&hook), 4).unwrap();
        assert_eq!(plain, hooked);
        assert!(hook.counts().iter().all(|&c| c == 4));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let o = oracle(ScheduleKind::VpContinuous);
        let x = ode_sample(&o, &SamplerConfig::ode(10), 0, None, 1).unwrap();
        assert_eq!(x.nrows(), 0);
        let bad = Array2::zeros((3, 5));
        assert!(ode_sample_from(&o, &SamplerConfig::ode(10), bad.view(), None).is_err());
    }
}
