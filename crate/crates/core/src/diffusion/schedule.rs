//! Noise schedules for the variance-preserving (VP) and variance-exploding
//! (VE) families, in discrete and continuous time.
//!
//! Two time scales appear throughout the crate:
//! - *native* time `t`: a step index in `0..=T` for discrete schedules, a
//!   real in `[0, 1]` for continuous ones;
//! - *normalized* time `tau = t / horizon` in `[0, 1]`, which samplers use.
//!
//! Discrete schedules also carry a continuous counterpart (same beta or sigma
//! range) that the ODE and exponential-integrator samplers integrate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VpDiscrete,
    VeDiscrete,
    VpContinuous,
    VeContinuous,
}

impl ScheduleKind {
    pub fn is_vp(self) -> bool {
        matches!(self, ScheduleKind::VpDiscrete | ScheduleKind::VpContinuous)
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, ScheduleKind::VpDiscrete | ScheduleKind::VeDiscrete)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::VpDiscrete => "vp_discrete",
            ScheduleKind::VeDiscrete => "ve_discrete",
            ScheduleKind::VpContinuous => "vp_continuous",
            ScheduleKind::VeContinuous => "ve_continuous",
        }
    }
}

/// Lower end of the training time range for continuous schedules.
pub const CONTINUOUS_TIME_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Number of discrete steps T. For continuous schedules this is the
    /// default sampling grid size.
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
}

fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_sigma_min() -> f64 {
    0.01
}
fn default_sigma_max() -> f64 {
    10.0
}

/// A validated schedule with the discrete cumulative products precomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// `alpha_bar[i]` for `i = 0..=T` (VP discrete only).
    alpha_bars: Vec<f64>,
    /// `sigma[i]` for `i = 0..=T` (VE discrete only), `sigma[0] = 0`.
    sigmas: Vec<f64>,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        NoiseSchedule::from_spec(spec)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec
    }
}

impl NoiseSchedule {
    /// Schedule with the default constants: VP beta in `[0.1, 20]` (that is
    /// `[1e-4 T, 0.02 T]` per step at T = 1000), VE sigma in `[0.01, 10]`.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        Self::from_spec(ScheduleSpec {
            kind,
            steps,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        if spec.steps == 0 {
            return Err(Error::input("schedule needs at least one step"));
        }
        if !(spec.beta_min > 0.0 && spec.beta_max > spec.beta_min) {
            return Err(Error::input("need 0 < beta_min < beta_max"));
        }
        if !(spec.sigma_min > 0.0 && spec.sigma_max > spec.sigma_min) {
            return Err(Error::input("need 0 < sigma_min < sigma_max"));
        }
        let t = spec.steps;
        let mut alpha_bars = Vec::new();
        let mut sigmas = Vec::new();
        match spec.kind {
            ScheduleKind::VpDiscrete => {
                alpha_bars.reserve(t + 1);
                alpha_bars.push(1.0);
                let mut acc = 1.0;
                for i in 1..=t {
                    let beta = discrete_beta(&spec, i);
                    if beta >= 1.0 {
                        return Err(Error::input(format!(
                            "beta_{i} = {beta} >= 1; use more steps or a smaller beta_max"
                        )));
                    }
                    acc *= 1.0 - beta;
                    alpha_bars.push(acc);
                }
            }
            ScheduleKind::VeDiscrete => {
                sigmas.reserve(t + 1);
                sigmas.push(0.0);
                for i in 1..=t {
                    let frac = if t > 1 {
                        (i - 1) as f64 / (t - 1) as f64
                    } else {
                        1.0
                    };
                    sigmas.push(spec.sigma_min * (spec.sigma_max / spec.sigma_min).powf(frac));
                }
            }
            _ => {}
        }
        Ok(Self {
            spec,
            alpha_bars,
            sigmas,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn is_vp(&self) -> bool {
        self.spec.kind.is_vp()
    }

    pub fn is_discrete(&self) -> bool {
        self.spec.kind.is_discrete()
    }

    /// Native time that normalizes to 1.
    pub fn horizon(&self) -> f64 {
        if self.is_discrete() {
            self.spec.steps as f64
        } else {
            1.0
        }
    }

    /// Per-step beta of the discrete VP chain, `i` in `1..=T`.
    pub fn beta(&self, i: usize) -> Result<f64> {
        if self.spec.kind != ScheduleKind::VpDiscrete || i == 0 || i > self.spec.steps {
            return Err(Error::input(format!("beta index {i} outside 1..=T")));
        }
        Ok(discrete_beta(&self.spec, i))
    }

    /// VP signal coefficient alpha_t (the cumulative product for discrete
    /// schedules, `exp(-int_0^t beta)` for continuous ones).
    pub fn vp_signal_coeff(&self, t: f64) -> Result<f64> {
        match self.spec.kind {
            ScheduleKind::VpDiscrete => {
                let i = self.discrete_index(t)?;
                Ok(self.alpha_bars[i])
            }
            ScheduleKind::VpContinuous => {
                check_unit(t)?;
                Ok(self.continuous_alpha_bar(t))
            }
            _ => Err(Error::input("signal coefficient requested from a VE schedule")),
        }
    }

    /// VE noise level sigma_t.
    pub fn ve_sigma(&self, t: f64) -> Result<f64> {
        match self.spec.kind {
            ScheduleKind::VeDiscrete => {
                let i = self.discrete_index(t)?;
                Ok(self.sigmas[i])
            }
            ScheduleKind::VeContinuous => {
                check_unit(t)?;
                Ok(self.continuous_sigma(t))
            }
            _ => Err(Error::input("sigma requested from a VP schedule")),
        }
    }

    /// Perturbation kernel `(mean coefficient, std)` at native time `t`.
    pub fn marginal(&self, t: f64) -> Result<(f64, f64)> {
        if self.is_vp() {
            let a = self.vp_signal_coeff(t)?;
            Ok((a.sqrt(), (1.0 - a).sqrt()))
        } else {
            Ok((1.0, self.ve_sigma(t)?))
        }
    }

    /// Perturbation kernel at normalized time. On a discrete schedule this uses
    /// the exact table when `tau * T` lands on an integer step and the
    /// continuous counterpart in between.
    pub fn marginal_tau(&self, tau: f64) -> (f64, f64) {
        if self.is_discrete() {
            let native = tau * self.horizon();
            let rounded = native.round();
            if (native - rounded).abs() < 1e-9 && rounded >= 0.0 && rounded <= self.horizon() {
                return self
                    .marginal(rounded)
                    .expect("grid index checked above");
            }
        }
        self.continuous_marginal(tau)
    }

    /// Continuous-time kernel `(mean coefficient, std)` at `tau` in `[0, 1]`.
    pub fn continuous_marginal(&self, tau: f64) -> (f64, f64) {
        if self.is_vp() {
            let a = self.continuous_alpha_bar(tau);
            (a.sqrt(), (1.0 - a).sqrt())
        } else {
            (1.0, self.continuous_sigma(tau))
        }
    }

    fn continuous_alpha_bar(&self, tau: f64) -> f64 {
        let s = &self.spec;
        (-(s.beta_min * tau + 0.5 * (s.beta_max - s.beta_min) * tau * tau)).exp()
    }

    fn continuous_sigma(&self, tau: f64) -> f64 {
        let s = &self.spec;
        s.sigma_min * (s.sigma_max / s.sigma_min).powf(tau)
    }

    /// Continuous beta(tau) of the VP SDE.
    pub fn continuous_beta(&self, tau: f64) -> f64 {
        let s = &self.spec;
        s.beta_min + tau * (s.beta_max - s.beta_min)
    }

    /// SDE coefficients `(f, g^2)` at `tau`, with drift `f(x, tau) = f * x`.
    pub fn sde_coeffs(&self, tau: f64) -> (f64, f64) {
        if self.is_vp() {
            let b = self.continuous_beta(tau);
            (-0.5 * b, b)
        } else {
            let s = &self.spec;
            let sigma = self.continuous_sigma(tau);
            (0.0, 2.0 * sigma * sigma * (s.sigma_max / s.sigma_min).ln())
        }
    }

    /// Half log-SNR `lambda = log(alpha / sigma)` of the continuous VP kernel.
    pub fn log_snr(&self, tau: f64) -> f64 {
        let (a, s) = self.continuous_marginal(tau);
        a.ln() - s.ln()
    }

    /// Inverse of [`Self::log_snr`] for VP schedules.
    pub fn tau_from_log_snr(&self, lambda: f64) -> f64 {
        let s = &self.spec;
        let delta = s.beta_max - s.beta_min;
        // -log(alpha_bar) = log(1 + exp(-2 lambda))
        let l = (-2.0 * lambda).exp().ln_1p();
        2.0 * l / (s.beta_min + (s.beta_min * s.beta_min + 2.0 * delta * l).sqrt())
    }

    /// Smallest normalized time the samplers integrate down to.
    pub fn sampling_end(&self) -> f64 {
        match self.spec.kind {
            ScheduleKind::VpDiscrete | ScheduleKind::VeDiscrete => 0.0,
            ScheduleKind::VpContinuous => 1e-3,
            ScheduleKind::VeContinuous => 1e-5,
        }
    }

    /// End time used by the ODE-based samplers, which always integrate the
    /// continuous counterpart.
    pub fn ode_end(&self) -> f64 {
        if self.is_vp() {
            1e-3
        } else {
            1e-5
        }
    }

    /// Normalized times `tau_0 < tau_1 < ... < tau_n = 1` of an `n`-step
    /// sampling grid. Grid index `k` is the diffusion step the chain occupies
    /// after `n - k` reverse steps. Discrete schedules use evenly strided
    /// integer steps ending at step 0.
    pub fn grid(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Ok(vec![1.0]);
        }
        if self.is_discrete() {
            let t = self.spec.steps;
            if n > t {
                return Err(Error::config(format!(
                    "{n} sampling steps exceed the {t} discrete steps of the schedule"
                )));
            }
            Ok((0..=n)
                .map(|k| ((k * t) as f64 / n as f64).round() / t as f64)
                .collect())
        } else {
            let end = self.sampling_end();
            Ok((0..=n)
                .map(|k| end + (1.0 - end) * k as f64 / n as f64)
                .collect())
        }
    }

    fn discrete_index(&self, t: f64) -> Result<usize> {
        let r = t.round();
        if !t.is_finite() || (t - r).abs() > 1e-9 || r < 0.0 || r > self.spec.steps as f64 {
            return Err(Error::input(format!(
                "time {t} is not a step index in 0..={}",
                self.spec.steps
            )));
        }
        Ok(r as usize)
    }
}

fn discrete_beta(spec: &ScheduleSpec, i: usize) -> f64 {
    let t = spec.steps as f64;
    let lo = spec.beta_min / t;
    let hi = spec.beta_max / t;
    if spec.steps == 1 {
        return lo;
    }
    lo + (i - 1) as f64 / (spec.steps - 1) as f64 * (hi - lo)
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vp_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        assert_eq!(s.vp_signal_coeff(0.0).unwrap(), 1.0);
        assert!(s.vp_signal_coeff(1000.0).unwrap() < 1e-4);
        let c = NoiseSchedule::new(ScheduleKind::VpContinuous, 1000).unwrap();
        assert_eq!(c.vp_signal_coeff(0.0).unwrap(), 1.0);
        assert!(c.vp_signal_coeff(1.0).unwrap() < 1e-4);
    }

    #[test]
    fn vp_strictly_decreasing_on_grid() {
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        let vals: Vec<f64> = (0..=1000)
            .map(|t| s.vp_signal_coeff(t as f64).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn out_of_range_times_rejected() {
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 100).unwrap();
        assert!(s.vp_signal_coeff(101.0).is_err());
        assert!(s.vp_signal_coeff(2.5).is_err());
        let c = NoiseSchedule::new(ScheduleKind::VpContinuous, 100).unwrap();
        assert!(c.vp_signal_coeff(1.5).is_err());
        assert!(c.ve_sigma(0.5).is_err());
    }

    #[test]
    fn ve_levels_increase_from_zero() {
        let s = NoiseSchedule::new(ScheduleKind::VeDiscrete, 1000).unwrap();
        assert_eq!(s.ve_sigma(0.0).unwrap(), 0.0);
        let vals: Vec<f64> = (0..=1000).map(|t| s.ve_sigma(t as f64).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        assert!((vals[1000] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn log_snr_round_trips() {
        let s = NoiseSchedule::new(ScheduleKind::VpContinuous, 1000).unwrap();
        for k in 1..100 {
            let tau = k as f64 / 100.0;
            let back = s.tau_from_log_snr(s.log_snr(tau));
            assert!((back - tau).abs() < 1e-10, "{tau} -> {back}");
        }
    }

    #[test]
    fn schedule_serializes_as_spec() {
        let s = NoiseSchedule::new(ScheduleKind::VeContinuous, 500).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn discrete_grid_is_integer_strided() {
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        let g = s.grid(40).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[40], 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(s.grid(1001).is_err());
    }

    #[test]
    fn discrete_vp_tracks_continuous_on_grid() {
        // Mean coefficient and variance; the std coefficient amplifies the
        // gap near t = 0 through the square root.
        let s = NoiseSchedule::new(ScheduleKind::VpDiscrete, 1000).unwrap();
        for i in 0..=1000 {
            let (a, b) = s.marginal(i as f64).unwrap();
            let (c, d) = s.continuous_marginal(i as f64 / 1000.0);
            assert!((a - c).abs() < 1e-3, "step {i}: mean {a} vs {c}");
            assert!((b * b - d * d).abs() < 1e-3, "step {i}: var {} vs {}", b * b, d * d);
        }
    }
}
