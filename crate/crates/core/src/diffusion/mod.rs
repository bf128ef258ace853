//! Noise schedules, perturbation kernels and training objectives.

pub mod kernels;
pub mod losses;
pub mod model;
pub mod multinomial;
pub mod schedule;

pub use kernels::{multinomial_perturb, multinomial_perturb_with, perturb_ve, perturb_vp};
pub use losses::{ddpm_loss, smld_loss, ssde_loss, LossBatch, Predictor};
pub use model::{DiffusionModel, TrainConfig, TrainingLog};
pub use multinomial::tabddpm_loss;
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
