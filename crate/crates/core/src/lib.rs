//! Conditional score-based residual diffusion for volumetric low-dose
//! denoising.
//!
//! A score model learns the distribution of the residual `low - nor` between
//! a low-dose and a normal-dose volume, conditioned on the low-dose volume,
//! an optional anatomical prior and normalized voxel coordinates. Denoising
//! integrates the reverse probability-flow ODE from Gaussian noise to a
//! residual sample and subtracts it from the low-dose input.

pub mod baselines;
pub mod diffusion;
pub mod dosesim;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scorenet;
pub mod train;
pub mod volumes;

pub use error::{CsrdError, Result};
