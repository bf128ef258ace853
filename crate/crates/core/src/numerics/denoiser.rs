//! The denoising network: an MLP fed `[x | time_embedding(t / horizon)]`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::embed::write_time_embedding;
use crate::numerics::mlp::{Activation, ForwardCache, Gradients, Mlp};
use crate::numerics::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    Noise,
    Score,
}

/// Layer widths and time-feature size for a [`DenoiserNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Silu
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            time_embed_dim: 16,
            activation: Activation::Silu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub mlp: Mlp,
    pub data_dim: usize,
    pub output_dim: usize,
    pub time_embed_dim: usize,
    /// Native time value mapped to 1.0 before embedding (T for discrete
    /// schedules, 1.0 for continuous ones).
    pub time_horizon: f64,
    pub target: PredictionTarget,
}

impl DenoiserNet {
    pub fn new(
        data_dim: usize,
        config: &NetConfig,
        time_horizon: f64,
        target: PredictionTarget,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Self::with_output_dim(data_dim, data_dim, config, time_horizon, target, rng)
    }

    /// A network whose output width differs from its data width (the tabular
    /// model emits noise for numeric columns and logits for categorical ones,
    /// which happen to share the input layout).
    pub fn with_output_dim(
        data_dim: usize,
        output_dim: usize,
        config: &NetConfig,
        time_horizon: f64,
        target: PredictionTarget,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if config.time_embed_dim % 2 != 0 {
            return Err(Error::input("time_embed_dim must be even"));
        }
        let mut dims = vec![data_dim + config.time_embed_dim];
        dims.extend(&config.hidden);
        dims.push(output_dim);
        let mlp = Mlp::new(&dims, config.activation, rng)?;
        Ok(Self {
            mlp,
            data_dim,
            output_dim,
            time_embed_dim: config.time_embed_dim,
            time_horizon,
            target,
        })
    }

    pub fn from_mlp(
        mlp: Mlp,
        time_embed_dim: usize,
        time_horizon: f64,
        target: PredictionTarget,
    ) -> Result<Self> {
        if time_embed_dim % 2 != 0 || mlp.input_dim() < time_embed_dim {
            return Err(Error::input("network input too small for the time embedding"));
        }
        let data_dim = mlp.input_dim() - time_embed_dim;
        Ok(Self {
            output_dim: mlp.output_dim(),
            mlp,
            data_dim,
            time_embed_dim,
            time_horizon,
            target,
        })
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::input(e.to_string()))?;
        let out = self.forward_batch(xs, &[t])?;
        Ok(out.row(0).to_owned())
    }

    /// Batched forward pass; `t` holds one native time per row, or a single
    /// value shared by all rows.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let input = self.build_input(x, t)?;
        self.mlp.forward(input.view())
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let input = self.build_input(x, t)?;
        self.mlp.forward_cached(input.view())
    }

    /// Parameter gradients for upstream dL/d output.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Gradients> {
        Ok(self.mlp.backward(cache, upstream)?.0)
    }

    fn build_input(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        if x.ncols() != self.data_dim {
            return Err(Error::input(format!(
                "sample has dimension {}, network expects {}",
                x.ncols(),
                self.data_dim
            )));
        }
        if t.len() != 1 && t.len() != x.nrows() {
            return Err(Error::input("need one time value per row or a single shared one"));
        }
        let width = self.data_dim + self.time_embed_dim;
        let mut input = Array2::zeros((x.nrows(), width));
        let mut shared = vec![0.0; self.time_embed_dim];
        if t.len() == 1 {
            write_time_embedding(t[0] / self.time_horizon, &mut shared);
        }
        for (r, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for (dst, src) in row[..self.data_dim].iter_mut().zip(x.row(r)) {
                *dst = *src;
            }
            if t.len() == 1 {
                row[self.data_dim..].copy_from_slice(&shared);
            } else {
                write_time_embedding(t[r] / self.time_horizon, &mut row[self.data_dim..]);
            }
        }
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::Dense;
    use ndarray::array;

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::zeros(&[2 + 8, 16, 2], Activation::Silu).unwrap();
        let net = DenoiserNet::from_mlp(mlp, 8, 1.0, PredictionTarget::Noise).unwrap();
        let out = net.forward(&[0.7, -1.2], 0.3).unwrap();
        assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_without_time_features() {
        let mlp = Mlp::from_layers(
            vec![Dense {
                weight: array![[1.0, 0.0], [0.0, 1.0]],
                bias: array![0.0, 0.0],
            }],
            Activation::Silu,
        )
        .unwrap();
        let net = DenoiserNet::from_mlp(mlp, 0, 1.0, PredictionTarget::Noise).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0], 0.5).unwrap().to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let mut rng = RngStream::new(0, 0);
        let net =
            DenoiserNet::new(2, &NetConfig::default(), 1.0, PredictionTarget::Noise, &mut rng)
                .unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0, 3.0], 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn batched_and_single_agree() {
        let mut rng = RngStream::new(9, 0);
        let cfg = NetConfig {
            hidden: vec![16, 16],
            time_embed_dim: 8,
            activation: Activation::Silu,
        };
        let net = DenoiserNet::new(2, &cfg, 1.0, PredictionTarget::Noise, &mut rng).unwrap();
        let x = array![[0.5, -0.3], [1.0, 0.2]];
        let batch = net.forward_batch(x.view(), &[0.4, 0.9]).unwrap();
        for r in 0..2 {
            let single = net.forward(x.row(r).as_slice().unwrap(), [0.4, 0.9][r]).unwrap();
            for c in 0..2 {
                assert!((single[c] - batch[[r, c]]).abs() < 1e-14);
            }
        }
    }
}
