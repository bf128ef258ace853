//! Forward perturbation kernels.

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

/// `x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps` at native time `t`.
pub fn perturb_vp(x0: &[f64], t: f64, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dims(x0, eps)?;
    let a = schedule.vp_signal_coeff(t)?;
    let (m, s) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| m * x + s * e).collect())
}

/// `x_t = x0 + sigma_t eps` at native time `t`.
pub fn perturb_ve(x0: &[f64], t: f64, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dims(x0, eps)?;
    let sigma = schedule.ve_sigma(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| x + sigma * e).collect())
}

fn check_dims(x0: &[f64], eps: &[f64]) -> Result<()> {
    if x0.len() != eps.len() {
        return Err(Error::input(format!(
            "noise has dimension {}, sample has {}",
            eps.len(),
            x0.len()
        )));
    }
    Ok(())
}

/// Index of the hot entry of a one-hot vector.
pub fn one_hot_index(x: &[f64]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::input("one-hot vector needs at least two categories"));
    }
    let mut hot = None;
    for (i, &v) in x.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::input("one-hot vector has several hot entries"));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::input(format!("one-hot vector has entry {v}")));
        }
    }
    hot.ok_or_else(|| Error::input("one-hot vector has no hot entry"))
}

/// Uniform-corruption forward kernel: draw a category from
/// `Cat((1 - beta_bar) x0 + beta_bar / K)`.
pub fn multinomial_perturb_with(x0_onehot: &[f64], beta_bar: f64, rng: &mut RngStream) -> Result<usize> {
    let hot = one_hot_index(x0_onehot)?;
    if !(0.0..=1.0).contains(&beta_bar) {
        return Err(Error::input(format!("cumulative corruption {beta_bar} outside [0, 1]")));
    }
    Ok(corrupt_category(hot, x0_onehot.len(), beta_bar, rng))
}

/// [`multinomial_perturb_with`] with `beta_bar = 1 - alpha_t` of a VP schedule.
pub fn multinomial_perturb(
    x0_onehot: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<usize> {
    let beta_bar = 1.0 - schedule.vp_signal_coeff(t)?;
    multinomial_perturb_with(x0_onehot, beta_bar, rng)
}

/// Keep `hot` with probability `1 - beta_bar`, else resample uniformly.
/// Equivalent to sampling the mixture `(1 - beta_bar) e_hot + beta_bar / K`.
pub(crate) fn corrupt_category(hot: usize, k: usize, beta_bar: f64, rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    if u < beta_bar {
        rng.below(k)
    } else {
        hot
    }
}
