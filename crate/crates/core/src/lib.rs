//! Compositional inverse design with diffusion models on an elastic N-body
//! system.
//!
//! A denoising diffusion model is trained on short two-body trajectory
//! windows. At design time several copies of it are composed over
//! overlapping time windows and body pairs, and sampling is steered towards a
//! design objective. Surrogate-model baselines (CEM and backprop through a
//! learned rollout) and a ground-truth re-simulation harness complete the
//! pipeline.

pub mod baselines;
pub mod compose;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
