use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::losses::{divide_rows, loss_and_grad, objective_batch, Predictor};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::mlp::Mlp;
use crate::numerics::{opt_step, DenoiserNet, NetConfig, OptState, PredictionTarget, RngStream};

/// A denoising network bound to the schedule it was trained under.
///
/// Score networks are parameterized as `raw(x, t) / std(t)` so the raw
/// output stays order one across noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Exponential moving average of the weights used as the final model.
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            ema_decay: Some(0.995),
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let head = self.losses.iter().take(w).sum::<f64>() / w as f64;
        let tail = self.losses.iter().rev().take(w).sum::<f64>() / w as f64;
        (head, tail)
    }
}

pub fn target_for(kind: ScheduleKind) -> PredictionTarget {
    match kind {
        ScheduleKind::VpDiscrete => PredictionTarget::Noise,
        _ => PredictionTarget::Score,
    }
}

impl DiffusionModel {
    pub fn new(data_dim: usize, config: &NetConfig, schedule: NoiseSchedule, rng: &mut RngStream) -> Result<Self> {
        let net = DenoiserNet::new(
            data_dim,
            config,
            schedule.horizon(),
            target_for(schedule.kind()),
            rng,
        )?;
        Ok(Self { net, schedule })
    }

    pub fn dim(&self) -> usize {
        self.net.data_dim
    }

    fn std_native(&self, t: f64) -> f64 {
        self.schedule.marginal_tau(t / self.schedule.horizon()).1
    }

    /// Prediction in the network's own target (noise or score).
    pub fn predict_native(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let raw = self.net.forward_batch(x, t)?;
        Ok(match self.net.target {
            PredictionTarget::Noise => raw,
            PredictionTarget::Score => {
                let std: Vec<f64> = if t.len() == 1 {
                    vec![self.std_native(t[0]); x.nrows()]
                } else {
                    t.iter().map(|&ti| self.std_native(ti)).collect()
                };
                divide_rows(raw, &std)
            }
        })
    }

    /// Train in place with the objective matching the schedule kind.
    pub fn train(&mut self, data: ArrayView2<f64>, config: &TrainConfig, seed: u64) -> Result<TrainingLog> {
        if data.nrows() == 0 {
            return Err(Error::input("no training rows"));
        }
        if data.ncols() != self.dim() {
            return Err(Error::input("training data dimension does not match the model"));
        }
        let mut rng = RngStream::new(seed, 0);
        let mut opt = OptState::new(config.lr).with_weight_decay(config.weight_decay);
        let mut ema: Option<Mlp> = config.ema_decay.map(|_| self.net.mlp.clone());
        let mut log = TrainingLog::default();
        let mut batch_x = Array2::zeros((config.batch_size, self.dim()));
        for step in 0..config.steps {
            for mut row in batch_x.rows_mut() {
                row.assign(&data.row(rng.below(data.nrows())));
            }
            let batch = objective_batch(batch_x.view(), &self.schedule, &mut rng)?;
            let (loss, grads) = loss_and_grad(self, &batch)?;
            if !loss.is_finite() || loss > 1e8 {
                return Err(Error::Training(format!("loss diverged to {loss} at step {step}")));
            }
            opt_step(&mut self.net.mlp, &grads, &mut opt)?;
            if let (Some(avg), Some(decay)) = (ema.as_mut(), config.ema_decay) {
                ema_update(avg, &self.net.mlp, decay);
            }
            log.losses.push(loss);
        }
        if let Some(avg) = ema {
            self.net.mlp = avg;
        }
        if !self.net.mlp.is_finite() {
            return Err(Error::Training("non-finite parameters after training".into()));
        }
        Ok(log)
    }
}

pub(crate) fn ema_update(avg: &mut Mlp, current: &Mlp, decay: f64) {
    for (a, c) in avg.layers.iter_mut().zip(&current.layers) {
        a.weight.zip_mut_with(&c.weight, |x, &y| *x = decay * *x + (1.0 - decay) * y);
        a.bias.zip_mut_with(&c.bias, |x, &y| *x = decay * *x + (1.0 - decay) * y);
    }
}

impl Predictor for DiffusionModel {
    fn predict(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.predict_native(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::losses::{ddpm_loss, smld_loss, ssde_loss};

    fn two_mode(n: usize) -> Array2<f64> {
        let mut rng = RngStream::new(17, 3);
        let mut x = Array2::zeros((n, 2));
        for mut row in x.rows_mut() {
            let side = if rng.uniform() < 0.5 { -2.0 } else { 2.0 };
            row[0] = side + 0.3 * rng.normal();
            row[1] = 0.3 * rng.normal();
        }
        x
    }

    fn small_net() -> NetConfig {
        NetConfig {
            hidden: vec![32, 32],
            time_embed_dim: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn losses_finite_and_positive_at_init() {
        let data = two_mode(128);
        for kind in [
            ScheduleKind::VpDiscrete,
            ScheduleKind::VeDiscrete,
            ScheduleKind::VpContinuous,
            ScheduleKind::VeContinuous,
        ] {
            let s = NoiseSchedule::new(kind, 1000).unwrap();
            let mut rng = RngStream::new(1, 0);
            let m = DiffusionModel::new(2, &small_net(), s, &mut rng).unwrap();
            let (l, g) = match kind {
                ScheduleKind::VpDiscrete => ddpm_loss(&m, data.view(), &mut rng),
                ScheduleKind::VeDiscrete => smld_loss(&m, data.view(), &mut rng),
                _ => ssde_loss(&m, data.view(), &mut rng),
            }
            .unwrap();
            assert!(l.is_finite() && l > 0.0, "{kind:?}: {l}");
            assert!(g.max_abs().is_finite());
        }
    }

    #[test]
    fn ddpm_training_halves_loss() {
        let data = two_mode(2000);
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        let mut rng = RngStream::new(2, 0);
        let mut m = DiffusionModel::new(2, &small_net(), s, &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 128,
            ema_decay: None,
            ..TrainConfig::default()
        };
        let log = m.train(data.view(), &cfg, 11).unwrap();
        let (head, tail) = log.head_tail(50);
        assert!(tail < 0.5 * head, "head {head}, tail {tail}");
    }

    fn train_ssde(kind: ScheduleKind) -> (f64, f64) {
        let data = two_mode(2000);
        let s = NoiseSchedule::new(kind, 1000).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut m = DiffusionModel::new(2, &small_net(), s, &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: 2000,
            batch_size: 128,
            ema_decay: None,
            ..TrainConfig::default()
        };
        m.train(data.view(), &cfg, 12).unwrap().head_tail(100)
    }

    #[test]
    fn ssde_vp_training_halves_loss() {
        let (head, tail) = train_ssde(ScheduleKind::VpContinuous);
        assert!(tail < 0.5 * head, "head {head}, tail {tail}");
    }

    // On this mixture the Bayes-optimal VE objective is about 1.08 (Monte
    // Carlo with the exact mixture score), above half of the untrained loss,
    // so the VE run is checked against that floor instead.
    #[test]
    fn ssde_ve_training_approaches_optimum() {
        let (head, tail) = train_ssde(ScheduleKind::VeContinuous);
        assert!(tail < head && tail < 1.25 * 1.08, "head {head}, tail {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_mode(500);
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 100).unwrap();
        let run = || {
            let mut rng = RngStream::new(4, 0);
            let mut m = DiffusionModel::new(2, &small_net(), s.clone(), &mut rng).unwrap();
            m.train(data.view(), &TrainConfig { steps: 50, ..TrainConfig::default() }, 5)
                .unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
