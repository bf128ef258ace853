//! Fixtures shared by the benchmarks.

use diffprop::diffusion::{NoiseSchedule, ScheduleKind};
use diffprop::numerics::RngStream;
use diffprop::samplers::GaussianOracle;
use ndarray::Array2;

/// Standard-normal matrix from stream 0 of `seed`.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = RngStream::new(seed, 0);
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

/// Correlated 2D Gaussian with an exact score.
pub fn oracle() -> GaussianOracle {
    let schedule = NoiseSchedule::new(ScheduleKind::VpContinuous, 1000).expect("valid schedule");
    GaussianOracle::new(vec![1.0, -0.5], vec![vec![1.0, 0.3], vec![0.3, 0.5]], schedule).expect("valid oracle")
}
