use std::collections::BTreeMap;

use super::{ddim_invert_step, ensure_finite, guided_noise, guided_noise_capture, GuidanceContext, Trajectory};
use crate::denoiser::{AttentionTrace, Denoiser, KvCache, Route};
use crate::error::Result;
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// How self-attention K/V are recorded during inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KvCapture {
    #[default]
    Off,
    /// After each step reaches `z_t`, evaluate both branches again at `(z_t, t)` and
    /// record their K/V. The cache then matches what a sampler sees when `z~_t = z_t`.
    TwoPass,
    /// Record K/V from the inversion evaluation itself, which runs at `(z_{t_prev}, t)`.
    Inline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureOptions {
    pub kv: KvCapture,
    /// Record cross-attention of the conditional branch at every step.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct InversionOutput {
    pub trajectory: Trajectory,
    pub kv: Option<KvCache>,
    pub trace: Option<AttentionTrace>,
    /// Guided noise of the two-pass capture evaluations at `(z_t, t)`, keyed by `t`.
    pub aligned_noise: BTreeMap<usize, Latent>,
}

/// DDIM inversion of `z0` up the plan with guided noise.
pub fn invert(
    net: &dyn Denoiser,
    z0: &Latent,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    capture: CaptureOptions,
    seed: u64,
) -> Result<InversionOutput> {
    ensure_finite(z0, 0)?;
    let mut trajectory = Trajectory::new(plan.clone(), ctx.scale, seed, z0.clone());
    let (tokens, dim) = net.kv_geometry();
    let mut kv = (capture.kv != KvCapture::Off).then(|| KvCache::new(net.layer_count(), tokens, dim));
    let mut trace = capture.trace.then(|| {
        let (h, w) = net.attention_grid();
        AttentionTrace::new(h, w, ctx.cond.n_tokens())
    });
    let mut aligned_noise = BTreeMap::new();

    let mut z = z0.clone();
    for (t_prev, t) in plan.inversion_pairs() {
        let eps = match (capture.kv, kv.as_mut()) {
            (KvCapture::Inline, Some(cache)) => {
                guided_noise_capture(net, &z, t, ctx, Route::Inversion, cache, trace.as_mut())?
            }
            _ => guided_noise(net, &z, t, ctx, Route::Inversion, trace.as_mut())?,
        };
        z = ddim_invert_step(&z, &eps, t_prev, t, sched)?;
        ensure_finite(&z, t)?;
        if let (KvCapture::TwoPass, Some(cache)) = (capture.kv, kv.as_mut()) {
            let aligned = guided_noise_capture(net, &z, t, ctx, Route::Capture, cache, None)?;
            aligned_noise.insert(t, aligned);
        }
        trajectory.insert(t, z.clone())?;
    }
    Ok(InversionOutput { trajectory, kv, trace, aligned_noise })
}
