//! Reconstruction-exact diffusion inversion and editing on a small, fully deterministic
//! transformer denoiser.

pub mod denoiser;
pub mod editing;
pub mod error;
pub mod harness;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod sampling;
pub mod schedule;
