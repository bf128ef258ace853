//! Dense multilayer perceptron with hand-written backpropagation.
//!
//! Batches are row-major: one sample per row. Hidden layers use a smooth
//! activation; the output layer is linear.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer. `weight` is `(out, in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Intermediates kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Gradients with the same shapes as an [`Mlp`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::input(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = (1.0 / w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                layer.weight.mapv_inplace(|_| rng.normal() * scale);
                layer
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::input(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::input("consecutive layer shapes do not chain"));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let out = if i < last {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            } else {
                z.clone()
            };
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Backpropagate `grad_out` (dL/d output) through the cached pass.
    /// Returns parameter gradients and dL/d input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let last = self.layers.len() - 1;
        if grad_out.ncols() != self.output_dim() || grad_out.nrows() != cache.inputs[0].nrows() {
            return Err(Error::input(format!(
                "upstream gradient shape {:?} does not match output",
                grad_out.shape()
            )));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                let act = self.activation;
                Zip::from(&mut delta)
                    .and(&cache.pre_activations[i])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let mut weight = delta.t().dot(&cache.inputs[i]);
            if !weight.is_standard_layout() {
                // gemm may hand back column-major output for a transposed lhs.
                weight = weight.as_standard_layout().into_owned();
            }
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.layers[i].weight);
            grads.push(Dense { weight, bias });
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Parameter slices in a fixed order with their names.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                layer.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                layer.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::input(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 3], Activation::Silu).unwrap();
        let out = net.forward(array![[1.0, -2.0, 0.5]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_matches_closed_form() {
        // L = |Wx - y|^2, dL/dW = 2 (Wx - y) x^T
        let layer = Dense {
            weight: array![[0.5, -1.0], [2.0, 0.25]],
            bias: array![0.0, 0.0],
        };
        let net = Mlp::from_layers(vec![layer.clone()], Activation::Identity).unwrap();
        let x = array![[1.5, -0.5]];
        let y = array![[0.2, 0.7]];
        let (out, cache) = net.forward_cached(x.view()).unwrap();
        let upstream = (&out - &y) * 2.0;
        let (g, _) = net.backward(&cache, upstream.view()).unwrap();
        let r = layer.weight.dot(&x.row(0)) - y.row(0);
        for i in 0..2 {
            for j in 0..2 {
                let expect = 2.0 * r[i] * x[[0, j]];
                assert!((g.layers[0].weight[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new(3, 0);
        let net = Mlp::new(&[2, 8, 2], Activation::Silu, &mut rng).unwrap();
        let x = array![[0.3, -0.1], [1.0, 2.0]];
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, gin) = net.backward(&cache, Array2::zeros((2, 2)).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let net = Mlp::zeros(&[2, 4, 2], Activation::Silu).unwrap();
        assert!(matches!(
            net.forward(array![[1.0, 2.0, 3.0]].view()),
            Err(Error::Input(_))
        ));
    }

    // Worst relative error of backprop against central differences, over
    // parameters and inputs.
    fn gradcheck_error(dims: &[usize], activation: Activation, seed: u64) -> f64 {
        const H: f64 = 1e-5;
        const FLOOR: f64 = 1e-6;
        let mut rng = RngStream::new(seed, 0);
        let mut net = Mlp::new(dims, activation, &mut rng).unwrap();
        let rows = 3;
        let mut x = Array2::from_shape_fn((rows, dims[0]), |_| rng.normal());
        let g = Array2::from_shape_fn((rows, *dims.last().unwrap()), |_| rng.normal());
        let loss = |n: &Mlp, x: &Array2<f64>| (n.forward(x.view()).unwrap() * &g).sum();
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (grads, gin) = net.backward(&cache, g.view()).unwrap();
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        let mut worst = 0.0f64;
        let analytic: Vec<Vec<f64>> = grads.parameters().into_iter().map(|(_, p)| p.to_vec()).collect();
        for (k, expected) in analytic.iter().enumerate() {
            for (i, &a) in expected.iter().enumerate() {
                let orig = net.parameters_mut()[k].1[i];
                net.parameters_mut()[k].1[i] = orig + H;
                let up = loss(&net, &x);
                net.parameters_mut()[k].1[i] = orig - H;
                let down = loss(&net, &x);
                net.parameters_mut()[k].1[i] = orig;
                worst = worst.max(rel(a, (up - down) / (2.0 * H)));
            }
        }
        for idx in 0..x.len() {
            let (r, c) = (idx / dims[0], idx % dims[0]);
            let orig = x[[r, c]];
            x[[r, c]] = orig + H;
            let up = loss(&net, &x);
            x[[r, c]] = orig - H;
            let down = loss(&net, &x);
            x[[r, c]] = orig;
            worst = worst.max(rel(gin[[r, c]], (up - down) / (2.0 * H)));
        }
        worst
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn backprop_matches_finite_differences(
            input in 1usize..5,
            hidden in proptest::collection::vec(2usize..9, 1..4),
            output in 1usize..4,
            tanh in proptest::bool::ANY,
            seed in 0u64..10_000,
        ) {
            let mut dims = vec![input];
            dims.extend(hidden);
            dims.push(output);
            let act = if tanh { Activation::Tanh } else { Activation::Silu };
            let err = gradcheck_error(&dims, act, seed);
            proptest::prop_assert!(err < 1e-4, "relative error {}", err);
        }
    }
}
