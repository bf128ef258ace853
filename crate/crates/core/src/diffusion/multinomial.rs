//! Uniform-corruption multinomial diffusion for categorical columns.
//!
//! Forward step: `q(x_t | x_{t-1}) = Cat(a_t x_{t-1} + (1 - a_t) / K)`;
//! cumulative: `q(x_t | x0) = Cat(abar_t x0 + (1 - abar_t) / K)`. The network
//! predicts logits of x0, and the reverse step is the posterior
//! `q(x_{t-1} | x_t, x0_hat)`.

use crate::error::{Error, Result};

/// Posterior `q(x_{t-1} | x_t, x0)` where `x0` may be a soft distribution.
/// `alpha` is the single-step keep probability `a_t`, `alpha_bar_prev` the
/// cumulative keep probability at `t - 1`.
pub fn posterior(x_t: usize, x0: &[f64], alpha: f64, alpha_bar_prev: f64) -> Vec<f64> {
    let k = x0.len() as f64;
    let mut u: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let a = if j == x_t { alpha } else { 0.0 } + (1.0 - alpha) / k;
            let c = alpha_bar_prev * p + (1.0 - alpha_bar_prev) / k;
            a * c
        })
        .collect();
    let s: f64 = u.iter().sum();
    for v in &mut u {
        *v /= s;
    }
    u
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// KL divergence between the true posterior (built from the real `x0`) and
/// the model posterior (built from `softmax(logits)`), with its gradient
/// with respect to `logits`. At `alpha_bar_prev = 1` this reduces to the
/// decoder negative log-likelihood `-log p(x0 | x_1)`.
pub fn categorical_kl(
    x_t: usize,
    x0: usize,
    logits: &[f64],
    alpha: f64,
    alpha_bar_prev: f64,
) -> (f64, Vec<f64>) {
    let k = logits.len();
    let kf = k as f64;
    let mut onehot = vec![0.0; k];
    onehot[x0] = 1.0;
    let q = posterior(x_t, &onehot, alpha, alpha_bar_prev);
    let probs = softmax(logits);

    let a: Vec<f64> = (0..k)
        .map(|j| if j == x_t { alpha } else { 0.0 } + (1.0 - alpha) / kf)
        .collect();
    let c: Vec<f64> = probs
        .iter()
        .map(|&p| alpha_bar_prev * p + (1.0 - alpha_bar_prev) / kf)
        .collect();
    let u: Vec<f64> = a.iter().zip(&c).map(|(a, c)| a * c).collect();
    let s: f64 = u.iter().sum();

    let mut kl = 0.0;
    for j in 0..k {
        if q[j] > 0.0 {
            let p = (u[j] / s).max(1e-300);
            kl += q[j] * (q[j].ln() - p.ln());
        }
    }

    // dKL/du_j = 1/S - q_j/u_j, then through c_j = abar p_j + const and softmax.
    let g_probs: Vec<f64> = (0..k)
        .map(|j| {
            let du = 1.0 / s - if q[j] > 0.0 { q[j] / u[j].max(1e-300) } else { 0.0 };
            du * a[j] * alpha_bar_prev
        })
        .collect();
    let dot: f64 = g_probs.iter().zip(&probs).map(|(g, p)| g * p).sum();
    let grad = probs
        .iter()
        .zip(&g_probs)
        .map(|(p, g)| p * (g - dot))
        .collect();
    (kl.max(0.0), grad)
}

/// Mixed objective `L_num + (sum of categorical losses) / C`.
pub fn tabddpm_loss(num_loss: f64, cat_losses: &[f64], categorical_columns: usize) -> Result<f64> {
    if cat_losses.len() != categorical_columns {
        return Err(Error::input(format!(
            "{} categorical losses for {} categorical columns",
            cat_losses.len(),
            categorical_columns
        )));
    }
    if categorical_columns == 0 {
        return Ok(num_loss);
    }
    Ok(num_loss + cat_losses.iter().sum::<f64>() / categorical_columns as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_combination() {
        assert_eq!(tabddpm_loss(1.0, &[], 0).unwrap(), 1.0);
        assert_eq!(tabddpm_loss(1.0, &[2.0, 4.0], 2).unwrap(), 4.0);
        assert!(tabddpm_loss(1.0, &[2.0], 0).is_err());
    }

    #[test]
    fn kl_is_zero_for_confident_correct_prediction() {
        let mut logits = vec![-50.0; 3];
        logits[1] = 50.0;
        let (kl, _) = categorical_kl(2, 1, &logits, 0.9, 0.6);
        assert!(kl < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let (_, g) = categorical_kl(1, 2, &logits, 0.85, 0.4);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = logits.clone();
            up[j] += h;
            let mut dn = logits.clone();
            dn[j] -= h;
            let fd = (categorical_kl(1, 2, &up, 0.85, 0.4).0 - categorical_kl(1, 2, &dn, 0.85, 0.4).0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7, "{j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn decoder_case_is_negative_log_likelihood() {
        let logits = vec![0.5, -0.5];
        let (kl, _) = categorical_kl(0, 1, &logits, 0.99, 1.0);
        let a = [0.99 + 0.005, 0.005];
        let p = softmax(&logits);
        let u = [a[0] * p[0], a[1] * p[1]];
        let expect = -(u[1] / (u[0] + u[1])).ln();
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn posterior_is_a_distribution() {
        let q = posterior(0, &[0.2, 0.5, 0.3], 0.7, 0.2);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&v| v > 0.0));
    }
}
