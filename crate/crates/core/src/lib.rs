//! Property inference on diffusion-model samples, and a sampling-time defense.

// `!(x > 0.0)` style guards are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod continuous2d;
pub mod defense;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod samplers;
pub mod tabular;

pub use error::{Error, Result};
