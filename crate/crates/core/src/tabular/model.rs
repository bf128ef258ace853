use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::losses::ddpm_batch;
use crate::diffusion::model::{ema_update, TrainConfig, TrainingLog};
use crate::diffusion::multinomial::{categorical_kl, posterior, softmax};
use crate::diffusion::kernels::corrupt_category;
use crate::diffusion::{tabddpm_loss, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::mlp::Mlp;
use crate::numerics::{opt_step, DenoiserNet, NetConfig, OptState, PredictionTarget, RngStream};
use crate::samplers::{intercept, StepInterceptor, CHUNK};
use crate::tabular::codec::{argmax, Block, TabularCodec};
use crate::tabular::dataset::TabularDataset;
use crate::tabular::schema::TabularSchema;

/// Gaussian diffusion on the numeric block and multinomial diffusion on each
/// categorical block, sharing one network. The network sees the joint state
/// and emits noise estimates for the numeric block and x0 logits for every
/// categorical block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    pub schema: TabularSchema,
    pub codec: TabularCodec,
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
}

/// Loss terms of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLoss {
    pub numeric: f64,
    pub categorical: Vec<f64>,
    pub total: f64,
}

struct MixedBatch {
    x_t: Array2<f64>,
    t: Vec<f64>,
    noise: Array2<f64>,
    /// Per categorical block: (noisy category, clean category) per row.
    cats: Vec<Vec<(usize, usize)>>,
}

impl TabularModel {
    /// Untrained model over the codec's state layout with a discrete VP
    /// schedule of `steps` steps.
    pub fn new(
        schema: TabularSchema,
        codec: TabularCodec,
        net_config: &NetConfig,
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let schedule = NoiseSchedule::new(ScheduleKind::VpDiscrete, steps)?;
        let d = codec.state_dim();
        let net = DenoiserNet::with_output_dim(d, d, net_config, schedule.horizon(), PredictionTarget::Noise, rng)?;
        Ok(Self {
            schema,
            codec,
            net,
            schedule,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.codec.state_dim()
    }

    fn keep(&self, t: usize) -> (f64, f64) {
        let ab = |i: usize| self.schedule.marginal(i as f64).expect("step in range").0.powi(2);
        let (abar, abar_prev) = (ab(t), ab(t - 1));
        (abar / abar_prev, abar_prev)
    }

    fn draw_batch(&self, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<MixedBatch> {
        let nd = self.codec.numeric_dim();
        let num = ddpm_batch(x0.slice(s![.., ..nd]), &self.schedule, rng)?;
        let mut x_t = Array2::zeros(x0.dim());
        x_t.slice_mut(s![.., ..nd]).assign(&num.x_t);
        let mut cats = Vec::new();
        for b in self.codec.blocks() {
            let mut pairs = Vec::with_capacity(x0.nrows());
            for r in 0..x0.nrows() {
                let clean = argmax(&x0.slice(s![r, b.offset..b.offset + b.len]).to_vec());
                let abar = self.schedule.marginal(num.t[r])?.0.powi(2);
                let noisy = corrupt_category(clean, b.len, 1.0 - abar, rng);
                x_t[[r, b.offset + noisy]] = 1.0;
                pairs.push((noisy, clean));
            }
            cats.push(pairs);
        }
        Ok(MixedBatch {
            x_t,
            t: num.t,
            noise: num.target,
            cats,
        })
    }

    /// Mixed loss `L_num + sum(L_cat) / C` and its gradient with respect to
    /// the network output.
    fn loss_and_output_grad(&self, batch: &MixedBatch, out: &Array2<f64>) -> Result<(MixedLoss, Array2<f64>)> {
        let n = out.nrows() as f64;
        let nd = self.codec.numeric_dim();
        let mut grad = Array2::zeros(out.dim());
        let mut numeric = 0.0;
        for r in 0..out.nrows() {
            let mut sq = 0.0;
            for c in 0..nd {
                let d = out[[r, c]] - batch.noise[[r, c]];
                sq += d * d;
                grad[[r, c]] = 2.0 * d / n;
            }
            numeric += sq;
        }
        numeric /= n;
        let blocks = self.codec.blocks();
        let c_count = blocks.len() as f64;
        let mut categorical = Vec::with_capacity(blocks.len());
        for (b, pairs) in blocks.iter().zip(&batch.cats) {
            let mut total = 0.0;
            for (r, &(noisy, clean)) in pairs.iter().enumerate() {
                let (alpha, abar_prev) = self.keep(batch.t[r] as usize);
                let logits = out.slice(s![r, b.offset..b.offset + b.len]).to_vec();
                let (kl, g) = categorical_kl(noisy, clean, &logits, alpha, abar_prev);
                total += kl;
                for (j, gj) in g.into_iter().enumerate() {
                    grad[[r, b.offset + j]] = gj / (n * c_count);
                }
            }
            categorical.push(total / n);
        }
        let total = tabddpm_loss(numeric, &categorical, blocks.len())?;
        Ok((
            MixedLoss {
                numeric,
                categorical,
                total,
            },
            grad,
        ))
    }

    /// Loss of the current network on a freshly drawn batch of encoded rows.
    pub fn loss(&self, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<MixedLoss> {
        let batch = self.draw_batch(x0, rng)?;
        let out = self.net.forward_batch(batch.x_t.view(), &batch.t)?;
        Ok(self.loss_and_output_grad(&batch, &out)?.0)
    }

    /// Draw `m` joint states through the reverse chain. Categorical blocks
    /// are one-hot throughout; after an interceptor edits an intermediate
    /// state, each block is projected back to its arg-max category. The
    /// state at step 0 is returned as the interceptor left it.
    pub fn sample_states(&self, m: usize, interceptor: Option<&dyn StepInterceptor>, seed: u64) -> Result<Array2<f64>> {
        let d = self.state_dim();
        let nd = self.codec.numeric_dim();
        let blocks = self.codec.blocks();
        let steps = self.schedule.steps();
        let mut out = Array2::zeros((m, d));
        let mut start = 0;
        while start < m {
            let rows = CHUNK.min(m - start);
            let mut rngs: Vec<RngStream> = (start..start + rows).map(|c| RngStream::new(seed, c as u64)).collect();
            let mut x = Array2::zeros((rows, d));
            for (r, rng) in rngs.iter_mut().enumerate() {
                for c in 0..nd {
                    x[[r, c]] = rng.normal();
                }
                for b in &blocks {
                    x[[r, b.offset + rng.below(b.len)]] = 1.0;
                }
            }
            self.intercept_projected(interceptor, steps, &mut x, start, &blocks);
            for t in (1..=steps).rev() {
                let pred = self.net.forward_batch(x.view(), &[t as f64])?;
                let (alpha, abar_prev) = self.keep(t);
                let abar = alpha * abar_prev;
                let beta = 1.0 - alpha;
                let coef = beta / (1.0 - abar).sqrt();
                let inv = 1.0 / alpha.sqrt();
                let var = beta * (1.0 - abar_prev) / (1.0 - abar);
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for c in 0..nd {
                        let mut v = (x[[r, c]] - coef * pred[[r, c]]) * inv;
                        if var > 0.0 {
                            v += var.sqrt() * rng.normal();
                        }
                        x[[r, c]] = v;
                    }
                    for b in &blocks {
                        let cur = x.slice(s![r, b.offset..b.offset + b.len]).to_vec();
                        let x0_hat = softmax(&pred.slice(s![r, b.offset..b.offset + b.len]).to_vec());
                        let probs = posterior(argmax(&cur), &x0_hat, alpha, abar_prev);
                        let next = draw_category(&probs, rng);
                        for j in 0..b.len {
                            x[[r, b.offset + j]] = if j == next { 1.0 } else { 0.0 };
                        }
                    }
                }
                if t > 1 {
                    self.intercept_projected(interceptor, t - 1, &mut x, start, &blocks);
                } else {
                    intercept(interceptor, 0, &mut x, start);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("tabular sampler produced non-finite states".into()));
            }
            out.slice_mut(s![start..start + rows, ..]).assign(&x);
            start += rows;
        }
        Ok(out)
    }

    fn intercept_projected(
        &self,
        interceptor: Option<&dyn StepInterceptor>,
        step: usize,
        x: &mut Array2<f64>,
        offset: usize,
        blocks: &[Block],
    ) {
        let Some(hook) = interceptor else { return };
        if !hook.target_steps().contains(&step) {
            return;
        }
        intercept(interceptor, step, x, offset);
        for mut row in x.rows_mut() {
            for b in blocks {
                let slice = row.as_slice_mut().expect("standard layout");
                let hot = argmax(&slice[b.offset..b.offset + b.len]);
                for j in 0..b.len {
                    slice[b.offset + j] = if j == hot { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Generate and decode `m` rows.
    pub fn sample(&self, m: usize, interceptor: Option<&dyn StepInterceptor>, seed: u64) -> Result<TabularDataset> {
        let states = self.sample_states(m, interceptor, seed)?;
        self.codec.decode_dataset(&self.schema, states.view())
    }
}

fn draw_category(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

/// Fit a codec on the training rows and train a tabular diffusion model.
/// `steps` defaults to the schema's step count when `None`.
pub fn train_tabddpm(
    dataset: &TabularDataset,
    net_config: &NetConfig,
    steps: Option<usize>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(TabularModel, TrainingLog)> {
    if dataset.is_empty() {
        return Err(Error::input("no training rows"));
    }
    let codec = TabularCodec::fit(dataset)?;
    let data = codec.encode(dataset.rows.view())?;
    let steps = steps.unwrap_or_else(|| dataset.schema.default_steps());
    let mut init = RngStream::new(seed, 1);
    let mut model = TabularModel::new(dataset.schema.clone(), codec, net_config, steps, &mut init)?;
    let log = train_model(&mut model, data.view(), config, seed)?;
    Ok((model, log))
}

/// Train in place on encoded states.
pub fn train_model(model: &mut TabularModel, data: ArrayView2<f64>, config: &TrainConfig, seed: u64) -> Result<TrainingLog> {
    if data.ncols() != model.state_dim() {
        return Err(Error::input("encoded data does not match the model state"));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut opt = OptState::new(config.lr).with_weight_decay(config.weight_decay);
    let mut ema: Option<Mlp> = config.ema_decay.map(|_| model.net.mlp.clone());
    let mut log = TrainingLog::default();
    let mut batch_x = Array2::zeros((config.batch_size, model.state_dim()));
    for step in 0..config.steps {
        for mut row in batch_x.rows_mut() {
            row.assign(&data.row(rng.below(data.nrows())));
        }
        let batch = model.draw_batch(batch_x.view(), &mut rng)?;
        let (out, cache) = model.net.forward_cached(batch.x_t.view(), &batch.t)?;
        let (loss, grad_out) = model.loss_and_output_grad(&batch, &out)?;
        if !loss.total.is_finite() || loss.total > 1e8 {
            return Err(Error::Training(format!(
                "loss diverged at step {step}: numeric {}, categorical {:?}",
                loss.numeric, loss.categorical
            )));
        }
        let grads = model.net.backward(&cache, grad_out.view())?;
        opt_step(&mut model.net.mlp, &grads, &mut opt)?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            ema_update(avg, &model.net.mlp, decay);
        }
        log.losses.push(loss.total);
    }
    if let Some(avg) = ema {
        model.net.mlp = avg;
    }
    if !model.net.mlp.is_finite() {
        return Err(Error::Training("non-finite parameters after training".into()));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::losses::loss_value;
    use crate::diffusion::DiffusionModel;
    use crate::samplers::test_support::Counting;
    use crate::tabular::schema::Column;

    fn toy(n: usize, seed: u64) -> TabularDataset {
        let schema = TabularSchema::new(
            vec![Column::numeric("x"), Column::numeric("y"), Column::categorical("b", &["no", "yes"])],
            true,
        )
        .unwrap();
        let mut rng = RngStream::new(seed, 0);
        let rows = Array2::from_shape_fn((n, 3), |(_, c)| match c {
            0 => 3.0 + 2.0 * rng.normal(),
            1 => -1.0 + 0.5 * rng.normal(),
            _ => (rng.uniform() < 0.7) as usize as f64,
        });
        TabularDataset::train(schema, rows).unwrap()
    }

    fn small_net() -> NetConfig {
        NetConfig {
            hidden: vec![32, 32],
            time_embed_dim: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn numeric_only_loss_matches_ddpm() {
        let schema = TabularSchema::new(vec![Column::numeric("x"), Column::numeric("y")], true).unwrap();
        let mut rng = RngStream::new(0, 0);
        let rows = Array2::from_shape_fn((64, 2), |_| rng.normal());
        let ds = TabularDataset::train(schema.clone(), rows).unwrap();
        let codec = TabularCodec::fit(&ds).unwrap();
        let enc = codec.encode(ds.rows.view()).unwrap();
        let model = TabularModel::new(schema, codec, &small_net(), 100, &mut RngStream::new(1, 0)).unwrap();
        let tab = model.loss(enc.view(), &mut RngStream::new(9, 0)).unwrap();
        let plain = DiffusionModel {
            net: model.net.clone(),
            schedule: model.schedule.clone(),
        };
        let batch = ddpm_batch(enc.view(), &plain.schedule, &mut RngStream::new(9, 0)).unwrap();
        let expected = loss_value(&plain, &batch).unwrap();
        assert_eq!(tab.total, expected);
        assert!(tab.categorical.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy(300, 1);
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (a, _) = train_tabddpm(&ds, &small_net(), None, &cfg, 5).unwrap();
        let (b, _) = train_tabddpm(&ds, &small_net(), None, &cfg, 5).unwrap();
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn loss_decreases_on_mixed_schema() {
        let ds = toy(2000, 2);
        let cfg = TrainConfig {
            steps: 800,
            batch_size: 128,
            ema_decay: None,
            ..TrainConfig::default()
        };
        let (_, log) = train_tabddpm(&ds, &small_net(), None, &cfg, 3).unwrap();
        let (head, tail) = log.head_tail(50);
        assert!(tail < head, "head {head}, tail {tail}");
    }

    #[test]
    fn samples_are_legal_and_counted() {
        let ds = toy(200, 3);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (model, _) = train_tabddpm(&ds, &small_net(), Some(50), &cfg, 5).unwrap();
        assert_eq!(model.sample(0, None, 1).unwrap().len(), 0);
        let hook = Counting::new(&[0, 5, 50], 40);
        let out = model.sample(40, Some(&hook), 2).unwrap();
        assert!(hook.counts().iter().all(|&c| c == 3));
        for &v in out.rows.column(2) {
            assert!(v == 0.0 || v == 1.0);
        }
        let plain = model.sample(40, None, 2).unwrap();
        assert_eq!(plain, out);
    }
}
