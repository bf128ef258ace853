//! Reverse-time samplers: ancestral, predictor-corrector, probability-flow
//! ODE and a singlestep exponential-integrator solver.
//!
//! Every sampler walks a grid of normalized times and exposes each grid index
//! to an optional [`StepInterceptor`]; grid index `k` is the state after the
//! chain has descended to `tau_k`, so `k = n` is the prior draw and `k = 0`
//! the final sample. Chains are processed in fixed-size chunks, each chain
//! drawing from its own [`RngStream`](crate::numerics::RngStream) keyed by
//! `(seed, chain index)`.

mod ancestral;
mod dpm;
mod ode;
mod oracle;
mod pc;

use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{PredictionTarget, RngStream};

pub use ancestral::ancestral_sample;
pub use dpm::{dpm_grid, dpm_orders, dpm_sample, dpm_sample_from};
pub use ode::{ode_sample, ode_sample_from};
pub use oracle::GaussianOracle;
pub use pc::pc_sample;

pub(crate) const CHUNK: usize = 1000;

/// Score (and derived noise) estimates at normalized time `tau`.
pub trait ScoreModel: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn dim(&self) -> usize;
    fn score(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>>;

    fn noise(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        let std = self.schedule().marginal_tau(tau).1;
        Ok(self.score(x, tau)? * (-std))
    }
}

impl ScoreModel for DiffusionModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.net.data_dim
    }

    fn score(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        let pred = self.predict_native(x, &[tau * self.schedule.horizon()])?;
        Ok(match self.net.target {
            PredictionTarget::Score => pred,
            PredictionTarget::Noise => pred * (-1.0 / self.schedule.marginal_tau(tau).1),
        })
    }

    fn noise(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        let pred = self.predict_native(x, &[tau * self.schedule.horizon()])?;
        Ok(match self.net.target {
            PredictionTarget::Noise => pred,
            PredictionTarget::Score => pred * (-self.schedule.marginal_tau(tau).1),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Pc,
    Ode,
    Dpm,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Pc => "pc",
            SamplerKind::Ode => "ode",
            SamplerKind::Dpm => "dpm",
        }
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, SamplerKind::Ode | SamplerKind::Dpm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
    #[serde(default = "default_snr")]
    pub corrector_snr: f64,
    #[serde(default = "default_tol")]
    pub ode_rtol: f64,
    #[serde(default = "default_tol")]
    pub ode_atol: f64,
    #[serde(default = "default_order")]
    pub dpm_order: usize,
}

fn default_snr() -> f64 {
    0.16
}
fn default_tol() -> f64 {
    1e-5
}
fn default_order() -> usize {
    3
}

impl SamplerConfig {
    pub fn ancestral(n_steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ancestral,
            n_steps,
            corrector_snr: default_snr(),
            ode_rtol: default_tol(),
            ode_atol: default_tol(),
            dpm_order: default_order(),
        }
    }

    pub fn pc(n_steps: usize) -> Self {
        Self {
            kind: SamplerKind::Pc,
            ..Self::ancestral(n_steps)
        }
    }

    pub fn ode(n_steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ode,
            ..Self::ancestral(n_steps)
        }
    }

    pub fn dpm(n_steps: usize, order: usize) -> Self {
        Self {
            kind: SamplerKind::Dpm,
            dpm_order: order,
            ..Self::ancestral(n_steps)
        }
    }

    /// Defaults per kind: 1000 steps for the stochastic samplers and the ODE
    /// step grid, 40 model evaluations at order 3 for DPM.
    pub fn default_for(kind: SamplerKind) -> Self {
        match kind {
            SamplerKind::Ancestral => Self::ancestral(1000),
            SamplerKind::Pc => Self::pc(1000),
            SamplerKind::Ode => Self::ode(1000),
            SamplerKind::Dpm => Self::dpm(40, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 && self.kind != SamplerKind::Ancestral {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if !(self.ode_rtol > 0.0 && self.ode_atol > 0.0) {
            return Err(Error::config("ODE tolerances must be positive"));
        }
        if !(1..=3).contains(&self.dpm_order) {
            return Err(Error::config("dpm_order must be 1, 2 or 3"));
        }
        if !(self.corrector_snr >= 0.0 && self.corrector_snr.is_finite()) {
            return Err(Error::config("corrector_snr must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            SamplerKind::Dpm => format!("dpm{}-{}", self.dpm_order, self.n_steps),
            k => format!("{}-{}", k.name(), self.n_steps),
        }
    }
}

/// A hook that may rewrite chain states at chosen grid indices.
pub trait StepInterceptor: Sync {
    fn target_steps(&self) -> &BTreeSet<usize>;

    /// Rewrite one chain's state in place. Called exactly once per chain for
    /// every listed step the sampler visits.
    fn apply(&self, step: usize, chain: usize, x: &mut [f64]);
}

pub(crate) fn intercept(
    interceptor: Option<&dyn StepInterceptor>,
    step: usize,
    x: &mut Array2<f64>,
    chain_offset: usize,
) {
    if let Some(hook) = interceptor {
        if hook.target_steps().contains(&step) {
            for (r, mut row) in x.rows_mut().into_iter().enumerate() {
                hook.apply(step, chain_offset + r, row.as_slice_mut().expect("standard layout"));
            }
        }
    }
}

/// Normalized times of the grid that the given sampler addresses by index.
pub fn step_grid(schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<Vec<f64>> {
    match config.kind {
        SamplerKind::Dpm => Ok(dpm_grid(schedule, config.n_steps, config.dpm_order)?.0),
        _ => schedule.grid(config.n_steps),
    }
}

/// Draw `m` samples with the configured sampler.
pub fn sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    m: usize,
    interceptor: Option<&dyn StepInterceptor>,
    seed: u64,
) -> Result<Array2<f64>> {
    config.validate()?;
    match config.kind {
        SamplerKind::Ancestral => ancestral_sample(model, config, m, interceptor, seed),
        SamplerKind::Pc => pc_sample(model, config, m, interceptor, seed),
        SamplerKind::Ode => ode_sample(model, config, m, interceptor, seed),
        SamplerKind::Dpm => dpm_sample(model, config, m, interceptor, seed),
    }
}

/// Prior draws for chains `offset..offset + rows`, one stream per chain.
pub(crate) fn prior_chunk(
    schedule: &NoiseSchedule,
    dim: usize,
    offset: usize,
    rows: usize,
    seed: u64,
) -> (Array2<f64>, Vec<RngStream>) {
    let scale = if schedule.is_vp() {
        1.0
    } else {
        schedule.marginal_tau(1.0).1
    };
    let mut rngs: Vec<RngStream> = (offset..offset + rows)
        .map(|c| RngStream::new(seed, c as u64))
        .collect();
    let mut x = Array2::zeros((rows, dim));
    for (row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row {
            *v = scale * rng.normal();
        }
    }
    (x, rngs)
}

/// Initial noise for chains `0..m` exactly as the stochastic samplers draw it.
pub fn prior_noise(schedule: &NoiseSchedule, dim: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((m, dim));
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let (x, _) = prior_chunk(schedule, dim, start, rows, seed);
        out.slice_mut(s![start..start + rows, ..]).assign(&x);
        start += rows;
    }
    out
}

/// Run `f(offset, rows)` over fixed-size chunks and stack the results.
pub(crate) fn by_chunks(
    m: usize,
    dim: usize,
    mut f: impl FnMut(usize, usize) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((m, dim));
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let chunk = f(start, rows)?;
        out.slice_mut(s![start..start + rows, ..]).assign(&chunk);
        start += rows;
    }
    Ok(out)
}

pub(crate) fn fill_noise(z: &mut Array2<f64>, rngs: &mut [RngStream]) {
    for (row, rng) in z.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row {
            *v = rng.normal();
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    pub struct Counting {
        pub steps: BTreeSet<usize>,
        pub calls: Vec<AtomicUsize>,
    }

    impl Counting {
        pub fn new(steps: &[usize], chains: usize) -> Self {
            Self {
                steps: steps.iter().copied().collect(),
                calls: (0..chains).map(|_| AtomicUsize::new(0)).collect(),
            }
        }

        pub fn counts(&self) -> Vec<usize> {
            self.calls.iter().map(|c| c.load(Ordering::SeqCst)).collect()
        }
    }

    impl StepInterceptor for Counting {
        fn target_steps(&self) -> &BTreeSet<usize> {
            &self.steps
        }

        fn apply(&self, _step: usize, chain: usize, _x: &mut [f64]) {
            self.calls[chain].fetch_add(1, Ordering::SeqCst);
        }
    }

    pub fn moments(x: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = x.nrows() as f64;
        let d = x.ncols();
        let mean: Vec<f64> = (0..d).map(|c| x.column(c).sum() / n).collect();
        let mut cov = Array2::zeros((d, d));
        for row in x.rows() {
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        (mean, cov)
    }
}
