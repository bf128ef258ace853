//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mlp::{Gradients, Mlp};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// One Adam update over named parameter slices. Moment buffers are
    /// allocated on the first call and must keep the same shapes afterwards.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[(String, &[f64])]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::input("parameter and gradient lists differ in length"));
        }
        for ((name, g), p) in grads.iter().zip(&params) {
            if g.len() != p.len() {
                return Err(Error::input(format!("gradient shape mismatch for {name}")));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {bad} in parameter {name}"
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(&params)
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::input("optimizer state does not match parameter shapes"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, (_, g))) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Apply one Adam step to every parameter of `net`.
pub fn opt_step(net: &mut Mlp, grads: &Gradients, state: &mut OptState) -> Result<()> {
    let named = grads.parameters();
    let params: Vec<&mut [f64]> = net.parameters_mut().into_iter().map(|(_, p)| p).collect();
    state.update(params, &named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Dense};
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = Mlp::from_layers(
            vec![Dense {
                weight: array![[1.0, 2.0]],
                bias: array![0.5],
            }],
            Activation::Identity,
        )
        .unwrap();
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        let mut st = OptState::new(1e-3);
        opt_step(&mut net, &grads, &mut st).unwrap();
        assert_eq!(net, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [0.0];
        let mut st = OptState::new(0.1);
        st.update(vec![&mut w], &[("w".to_string(), &[1.0][..])]).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-6, "w = {}", w[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = [0.0];
        let mut st = OptState::new(0.1);
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 3.0)];
            st.update(vec![&mut w], &[("w".to_string(), &g[..])]).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = [0.0];
        let mut st = OptState::new(0.1);
        let err = st
            .update(vec![&mut w], &[("layer3.bias".to_string(), &[f64::NAN][..])])
            .unwrap_err();
        assert!(err.to_string().contains("layer3.bias"));
    }
}
