//! Deterministic numerical substrate shared by every other module.

pub mod denoiser;
pub mod embed;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use denoiser::{DenoiserNet, NetConfig, PredictionTarget};
pub use embed::time_embedding;
pub use mlp::{Activation, Dense, ForwardCache, Gradients, Mlp};
pub use optim::{opt_step, OptState};
pub use rng::{derive_seed, RngStream};
