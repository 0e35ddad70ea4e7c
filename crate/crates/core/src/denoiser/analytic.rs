//! Closed-form denoisers without attention, used as oracles.
//!
//! Neither has self-attention layers: capture records nothing and only the empty layer
//! range can be injected.

use super::{Denoiser, EvalHooks, KvHook, PromptEmbedding};
use crate::error::Result;
use crate::latent::{Latent, LatentShape};
use crate::schedule::NoiseSchedule;

fn check_hooks(hooks: &EvalHooks<'_>) -> Result<()> {
    if let KvHook::Inject { layers, .. } = &hooks.kv {
        layers.validate(0)?;
    }
    Ok(())
}

/// Exact posterior-mean noise predictor for data `z0 ~ N(mean, std^2 I)`:
/// `eps(z, t) = (z - sqrt(ab) mean) sqrt(1 - ab) / (ab std^2 + 1 - ab)`.
/// The prompt is ignored.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub std: f64,
    schedule: NoiseSchedule,
    shape: LatentShape,
}

impl GaussianDenoiser {
    pub fn new(mean: f64, std: f64, schedule: NoiseSchedule, shape: LatentShape) -> Self {
        Self { mean, std, schedule, shape }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl Denoiser for GaussianDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn layer_count(&self) -> usize {
        0
    }

    fn kv_geometry(&self) -> (usize, usize) {
        (0, 0)
    }

    fn attention_grid(&self) -> (usize, usize) {
        (self.shape.height, self.shape.width)
    }

    fn max_timestep(&self) -> usize {
        self.schedule.total_train_steps()
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        _cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent> {
        self.check_inputs(z, t)?;
        check_hooks(hooks)?;
        let ab = self.schedule.alpha_bar(t)?;
        let shift = ab.sqrt() * self.mean;
        let gain = (1.0 - ab).sqrt() / (ab * self.std * self.std + 1.0 - ab);
        Ok(z.map(|v| (v - shift) * gain))
    }
}

/// Returns the same noise tensor for every input.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    eps: Latent,
    max_timestep: usize,
}

impl ConstantDenoiser {
    pub fn new(eps: Latent, max_timestep: usize) -> Self {
        Self { eps, max_timestep }
    }
}

impl Denoiser for ConstantDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.eps.shape()
    }

    fn layer_count(&self) -> usize {
        0
    }

    fn kv_geometry(&self) -> (usize, usize) {
        (0, 0)
    }

    fn attention_grid(&self) -> (usize, usize) {
        (self.eps.shape().height, self.eps.shape().width)
    }

    fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        _cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent> {
        self.check_inputs(z, t)?;
        check_hooks(hooks)?;
        Ok(self.eps.clone())
    }
}
