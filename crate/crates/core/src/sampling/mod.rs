//! DDIM stepping, guidance, inversion, and the reconstruction/editing samplers.
//!
//! Every sampler walks a [`TimestepPlan`](crate::schedule::TimestepPlan) from its first timestep down to `t = 0` and
//! returns the visited latents as a [`SampleOutput`]. Network evaluations are labelled
//! with a [`Route`] so wrapped denoisers can account for them.

mod invert;
mod mask;
mod samplers;
mod step;
mod trajectory;

pub use invert::{invert, CaptureOptions, InversionOutput, KvCapture};
pub use mask::{FullMask, MaskProvider, ZeroMask};
pub use samplers::{
    sample_direct, sample_fec_kv_reuse, sample_fec_noise, sample_fec_ref, sample_fec_ref_paired,
    sample_neg_prompt_baseline, KvReuseOptions, SampleMode,
};
pub use step::{cfg_combine, ddim_invert_step, ddim_step, desired_noise, desired_uncond};
pub use trajectory::{Trajectory, TRAJECTORY_MAGIC};
pub(crate) use trajectory::{read_series, write_series, Series};

pub use crate::denoiser::LayerRange;

use crate::denoiser::{AttentionTrace, Branch, Denoiser, EvalHooks, KvCache, KvHook, PromptEmbedding, Route};
use crate::error::{FecError, Result};
use crate::latent::Latent;

/// Guidance scale with the conditional and unconditional prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceContext {
    pub scale: f64,
    pub cond: PromptEmbedding,
    pub uncond: PromptEmbedding,
}

impl GuidanceContext {
    pub fn new(scale: f64, cond: PromptEmbedding, uncond: PromptEmbedding) -> Result<Self> {
        if !scale.is_finite() {
            return Err(FecError::InvalidRequest(format!("guidance scale {scale} is not finite")));
        }
        if !cond.same_shape(&uncond) {
            return Err(FecError::ShapeMismatch {
                expected: format!("{}x{} prompt tokens", cond.n_tokens(), cond.dim()),
                actual: format!("{}x{}", uncond.n_tokens(), uncond.dim()),
            });
        }
        Ok(Self { scale, cond, uncond })
    }

    /// The same prompts at another scale.
    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(scale, self.cond.clone(), self.uncond.clone())
    }

    /// Uses the conditional embedding for both branches.
    pub fn cond_as_uncond(&self) -> Self {
        Self { uncond: self.cond.clone(), ..self.clone() }
    }

    /// Guidance cannot move the prediction: either the scale is 1 or both branches see
    /// the same embedding. A single conditional evaluation then gives the guided noise.
    pub fn collapses(&self) -> bool {
        self.scale == 1.0 || self.cond.tokens() == self.uncond.tokens()
    }
}

/// Latents visited by a sampler, from the starting timestep down to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub path: Vec<(usize, Latent)>,
}

impl SampleOutput {
    pub fn final_latent(&self) -> &Latent {
        &self.path.last().expect("a sample path is never empty").1
    }

    pub fn into_final(mut self) -> Latent {
        self.path.pop().expect("a sample path is never empty").1
    }

    pub fn get(&self, t: usize) -> Option<&Latent> {
        self.path.iter().find(|(s, _)| *s == t).map(|(_, z)| z)
    }
}

pub(crate) fn ensure_finite(z: &Latent, t: usize) -> Result<()> {
    if !z.is_finite() {
        return Err(FecError::NonFinite { t });
    }
    Ok(())
}

/// Guided noise from plain evaluations; `trace` observes the conditional branch.
pub(crate) fn guided_noise(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    ctx: &GuidanceContext,
    route: Route,
    trace: Option<&mut AttentionTrace>,
) -> Result<Latent> {
    let eps_c = net.forward(z, t, &ctx.cond, &mut EvalHooks::plain(route, Branch::Cond).with_trace(trace))?;
    if ctx.collapses() {
        return Ok(eps_c);
    }
    let eps_u = net.forward(z, t, &ctx.uncond, &mut EvalHooks::plain(route, Branch::Uncond))?;
    cfg_combine(&eps_c, &eps_u, ctx.scale)
}

/// Guided noise from evaluations on both branches that record K/V into `cache`.
pub(crate) fn guided_noise_capture(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    ctx: &GuidanceContext,
    route: Route,
    cache: &mut KvCache,
    trace: Option<&mut AttentionTrace>,
) -> Result<Latent> {
    let mut hooks = EvalHooks::plain(route, Branch::Cond)
        .with_kv(KvHook::Capture { cache: &mut *cache, overwrite: false })
        .with_trace(trace);
    let eps_c = net.forward(z, t, &ctx.cond, &mut hooks)?;
    let mut hooks = EvalHooks::plain(route, Branch::Uncond)
        .with_kv(KvHook::Capture { cache, overwrite: false });
    let eps_u = net.forward(z, t, &ctx.uncond, &mut hooks)?;
    cfg_combine(&eps_c, &eps_u, ctx.scale)
}

/// Guided noise with each branch reading its own cached K/V over `layers`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_noise_inject(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    ctx: &GuidanceContext,
    route: Route,
    cache: &KvCache,
    layers: LayerRange,
    values_only: bool,
) -> Result<Latent> {
    let kv = KvHook::Inject { cache, layers, values_only };
    let eps_c = net.forward(z, t, &ctx.cond, &mut EvalHooks::plain(route, Branch::Cond).with_kv(kv))?;
    if ctx.scale == 1.0 {
        return Ok(eps_c);
    }
    let kv = KvHook::Inject { cache, layers, values_only };
    let eps_u = net.forward(z, t, &ctx.uncond, &mut EvalHooks::plain(route, Branch::Uncond).with_kv(kv))?;
    cfg_combine(&eps_c, &eps_u, ctx.scale)
}
