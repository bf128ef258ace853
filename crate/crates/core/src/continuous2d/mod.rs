//! A two-dimensional Gaussian-mixture testbed: datasets whose sensitive
//! property is the latent component, a learned property classifier, and
//! diffusion training on the points.

pub mod classifier;
pub mod mixture;

pub use classifier::{ClassifierConfig, ClassifierStats, PropertyClassifier};
pub use mixture::{Component, LabeledPoints, MixtureSpec};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoiseSchedule, ScheduleKind, TrainConfig, TrainingLog};
use crate::error::Result;
use crate::numerics::{NetConfig, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Step count of discrete schedules; ignored by continuous ones.
    pub discrete_steps: usize,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            train: TrainConfig {
                steps: 6000,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            discrete_steps: 1000,
        }
    }
}

/// Train the formulation selected by `kind` on 2D points. Initialization
/// draws from stream 1 of `seed` and minibatches from stream 0.
pub fn train_continuous_model(
    points: ArrayView2<f64>,
    kind: ScheduleKind,
    config: &ContinuousConfig,
    seed: u64,
) -> Result<(DiffusionModel, TrainingLog)> {
    let schedule = NoiseSchedule::new(kind, config.discrete_steps)?;
    let mut init = RngStream::new(seed, 1);
    let mut model = DiffusionModel::new(points.ncols(), &config.net, schedule, &mut init)?;
    let log = model.train(points, &config.train, seed)?;
    Ok((model, log))
}

/// Fraction of rows nearest to each mixture component.
pub fn component_fractions(spec: &MixtureSpec, points: ArrayView2<f64>) -> Vec<f64> {
    let mut counts = vec![0usize; spec.components.len()];
    for row in points.rows() {
        counts[spec.nearest_component(&[row[0], row[1]])] += 1;
    }
    let n = points.nrows().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::{sample, SamplerConfig};
    use crate::numerics::Mlp;
    use ndarray::Axis;

    #[test]
    fn vp_model_reproduces_component_fractions() {
        let spec = MixtureSpec::two_component();
        let data = spec.make_dataset(10_000, &[0.3], 4).unwrap();
        let (model, log) =
            train_continuous_model(data.points.view(), ScheduleKind::VpDiscrete, &ContinuousConfig::default(), 8)
                .unwrap();
        let head = log.head_tail(5).0;
        let tail = log.head_tail(200).1;
        assert!(tail <= 0.5 * head, "loss {head} -> {tail}");
        let out = sample(&model, &SamplerConfig::pc(500), 8000, None, 3).unwrap();
        let frac = component_fractions(&spec, out.view());
        assert!((frac[1] - 0.3).abs() <= 0.03, "fractions {frac:?}");
    }

    #[test]
    fn zero_net_samples_near_prior_mean() {
        let schedule = NoiseSchedule::new(ScheduleKind::VpContinuous, 1000).unwrap();
        let mut model =
            DiffusionModel::new(2, &NetConfig::default(), schedule, &mut RngStream::new(1, 1)).unwrap();
        let dims: Vec<usize> = std::iter::once(model.net.mlp.input_dim())
            .chain(model.net.mlp.layers.iter().map(|l| l.output_dim()))
            .collect();
        model.net.mlp = Mlp::zeros(&dims, model.net.mlp.activation).unwrap();
        let out = sample(&model, &SamplerConfig::pc(200), 4000, None, 2).unwrap();
        // With a zero score the reverse VP drift still inflates the spread
        // by about exp(integral of beta / 2), so the mean is checked in units
        // of the sample spread.
        let mean = out.mean_axis(Axis(0)).unwrap();
        let std = out.std_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!((mean[j] / std[j]).abs() < 0.1, "mean {mean}, std {std}");
        }
    }

    #[test]
    fn longer_training_lowers_frechet_distance() {
        let spec = MixtureSpec::two_component();
        let data = spec.make_dataset(5000, &[0.3], 4).unwrap();
        let real = spec.make_dataset(4000, &[0.3], 5).unwrap();
        let curve: Vec<f64> = [50, 2000]
            .into_iter()
            .map(|steps| {
                let mut config = ContinuousConfig::default();
                config.train.steps = steps;
                let (model, _) =
                    train_continuous_model(data.points.view(), ScheduleKind::VpDiscrete, &config, 8).unwrap();
                let out = sample(&model, &SamplerConfig::dpm(40, 3), 4000, None, 3).unwrap();
                crate::eval::frechet_distance(real.points.view(), out.view()).unwrap()
            })
            .collect();
        assert!(curve[1] < curve[0], "frechet by checkpoint {curve:?}");
    }
}
