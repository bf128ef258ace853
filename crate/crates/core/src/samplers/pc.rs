use ndarray::Array2;

use crate::error::Result;
use crate::samplers::{by_chunks, fill_noise, intercept, prior_chunk, SamplerConfig, ScoreModel, StepInterceptor};

fn mean_row_norm(x: &Array2<f64>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / x.nrows() as f64
}

/// Predictor-corrector sampling: a reverse-diffusion predictor step followed
/// by one Langevin corrector step at the new time. The final predictor step
/// returns its mean and is not followed by a corrector. The corrector step
/// size uses score and noise norms averaged over the chains of a chunk.
pub fn pc_sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    m: usize,
    interceptor: Option<&dyn StepInterceptor>,
    seed: u64,
) -> Result<Array2<f64>> {
    config.validate()?;
    let schedule = model.schedule();
    let n = config.n_steps;
    let grid = schedule.grid(n)?;
    let dim = model.dim();
    let snr = config.corrector_snr;
    let mut skipped = 0usize;
    let out = by_chunks(m, dim, |offset, rows| {
        let (mut x, mut rngs) = prior_chunk(schedule, dim, offset, rows, seed);
        intercept(interceptor, n, &mut x, offset);
        let mut z = Array2::zeros((rows, dim));
        for k in (1..=n).rev() {
            let (tau, tau_prev) = (grid[k], grid[k - 1]);
            let last = k == 1;

            // Predictor.
            let score = model.score(x.view(), tau)?;
            let (noise_var, corrector_alpha) = if schedule.is_vp() {
                let ab = schedule.marginal_tau(tau).0.powi(2);
                let ab_prev = schedule.marginal_tau(tau_prev).0.powi(2);
                let beta = 1.0 - ab / ab_prev;
                let keep = 2.0 - (1.0 - beta).sqrt();
                x.zip_mut_with(&score, |xv, &s| *xv = keep * *xv + beta * s);
                (beta, 1.0 - beta)
            } else {
                let g2 = schedule.marginal_tau(tau).1.powi(2) - schedule.marginal_tau(tau_prev).1.powi(2);
                x.scaled_add(g2, &score);
                (g2, 1.0)
            };
            if !last {
                fill_noise(&mut z, &mut rngs);
                x.scaled_add(noise_var.sqrt(), &z);
            }

            // Corrector.
            if !last && snr > 0.0 {
                let score = model.score(x.view(), tau_prev)?;
                fill_noise(&mut z, &mut rngs);
                let grad_norm = mean_row_norm(&score);
                let noise_norm = mean_row_norm(&z);
                let step = 2.0 * corrector_alpha * (snr * noise_norm / grad_norm).powi(2);
                if step.is_finite() && grad_norm > 0.0 {
                    x.scaled_add(step, &score);
                    x.scaled_add((2.0 * step).sqrt(), &z);
                } else {
                    skipped += 1;
                }
            }
            intercept(interceptor, k - 1, &mut x, offset);
        }
        Ok(x)
    })?;
    if skipped > 0 {
        log::warn!("corrector skipped {skipped} times on zero or non-finite score norm");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use crate::samplers::test_support::{moments, Counting};
    use crate::samplers::{ancestral_sample, GaussianOracle};

    // VE priors ignore the data mean, so VE oracles are centered to keep the
    // prior mismatch below the tolerances under test.
    fn oracle(kind: ScheduleKind) -> GaussianOracle {
        let s = NoiseSchedule::new(kind, 1000).unwrap();
        let mean = if kind.is_vp() { vec![1.0, -0.5] } else { vec![0.0, 0.0] };
        GaussianOracle::new(
            mean,
            vec![vec![0.5, 0.2], vec![0.2, 0.3]],
            s,
        )
        .unwrap()
    }

    #[test]
    fn recovers_gaussian_for_every_schedule_kind() {
        for kind in [
            ScheduleKind::VpDiscrete,
            ScheduleKind::VeDiscrete,
            ScheduleKind::VpContinuous,
            ScheduleKind::VeContinuous,
        ] {
            let o = oracle(kind);
            let x = pc_sample(&o, &SamplerConfig::pc(1000), 10_000, None, 5).unwrap();
            let (mean, cov) = moments(&x);
            let want = o.mean();
            assert!((mean[0] - want[0]).abs() < 0.05 && (mean[1] - want[1]).abs() < 0.05, "{kind:?} {mean:?}");
            let target = [[0.5, 0.2], [0.2, 0.3]];
            let mut fro = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    fro += (cov[[i, j]] - target[i][j]).powi(2);
                }
            }
            assert!(fro.sqrt() < 0.1, "{kind:?} cov {cov:?}");
        }
    }

    #[test]
    fn empty_request() {
        let o = oracle(ScheduleKind::VpDiscrete);
        let x = pc_sample(&o, &SamplerConfig::pc(10), 0, None, 5).unwrap();
        assert_eq!(x.nrows(), 0);
    }

    #[test]
    fn zero_snr_matches_ancestral_in_distribution() {
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        let o = GaussianOracle::new(vec![0.5], vec![vec![0.4]], s).unwrap();
        let mut cfg = SamplerConfig::pc(1000);
        cfg.corrector_snr = 0.0;
        let a = pc_sample(&o, &cfg, 1000, None, 11).unwrap();
        let b = ancestral_sample(&o, &SamplerConfig::ancestral(1000), 1000, None, 12).unwrap();
        let a: Vec<f64> = a.column(0).to_vec();
        let b: Vec<f64> = b.column(0).to_vec();
        let p = energy_test_p_value(&a, &b, 200);
        assert!(p > 0.01, "p = {p}");
    }

    /// Permutation p-value of the two-sample energy statistic in 1D.
    fn energy_test_p_value(a: &[f64], b: &[f64], permutations: usize) -> f64 {
        fn stat(a: &[f64], b: &[f64]) -> f64 {
            let mean_abs = |x: &[f64], y: &[f64]| {
                let mut s = 0.0;
                for u in x {
                    for v in y {
                        s += (u - v).abs();
                    }
                }
                s / (x.len() * y.len()) as f64
            };
            2.0 * mean_abs(a, b) - mean_abs(a, a) - mean_abs(b, b)
        }
        let observed = stat(a, b);
        let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let mut rng = crate::numerics::RngStream::new(77, 0);
        let mut exceed = 0;
        for _ in 0..permutations {
            for i in (1..pooled.len()).rev() {
                let j = rng.below(i + 1);
                pooled.swap(i, j);
            }
            if stat(&pooled[..a.len()], &pooled[a.len()..]) >= observed {
                exceed += 1;
            }
        }
        (exceed + 1) as f64 / (permutations + 1) as f64
    }

    #[test]
    fn identity_interceptor_is_neutral_and_counted() {
        let o = oracle(ScheduleKind::VpContinuous);
        let cfg = SamplerConfig::pc(100);
        let plain = pc_sample(&o, &cfg, 1200, None, 4).unwrap();
        let hook = Counting::new(&[0, 30, 99, 100], 1200);
        let hooked = pc_sample(&o, &cfg, 1200, Some(&hook), 4).unwrap();
        assert_eq!(plain, hooked);
        assert!(hook.counts().iter().all(|&c| c == 4));
    }
}
