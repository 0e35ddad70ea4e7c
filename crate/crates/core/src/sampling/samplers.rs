use super::mask::validate_mask;
use super::{
    cfg_combine, ddim_step, desired_noise, desired_uncond, ensure_finite, guided_noise, guided_noise_inject,
    GuidanceContext, LayerRange, MaskProvider, SampleOutput, Trajectory,
};
use crate::denoiser::{AttentionTrace, Branch, Denoiser, EvalHooks, KvCache, Route};
use crate::error::Result;
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// Reconstruct with the inversion prompts, or edit with another guidance context.
#[derive(Debug, Clone, Copy)]
pub enum SampleMode<'a> {
    Reconstruct,
    Edit(&'a GuidanceContext),
}

impl<'a> SampleMode<'a> {
    fn resolve(self, ctx: &'a GuidanceContext) -> (&'a GuidanceContext, Route) {
        match self {
            SampleMode::Reconstruct => (ctx, Route::Sampling),
            SampleMode::Edit(edit) => (edit, Route::Edit),
        }
    }
}

fn descend(
    net: &dyn Denoiser,
    z_start: &Latent,
    plan: &TimestepPlan,
    mut step: impl FnMut(&Latent, usize, usize) -> Result<Latent>,
) -> Result<SampleOutput> {
    let mut path = Vec::with_capacity(plan.steps() + 1);
    path.push((plan.start(), z_start.clone()));
    let mut z = z_start.clone();
    z.ensure_same_shape(&Latent::zeros(net.latent_shape()))?;
    for (t, t_prev) in plan.sampling_pairs() {
        z = step(&z, t, t_prev)?;
        ensure_finite(&z, t_prev)?;
        path.push((t_prev, z.clone()));
    }
    Ok(SampleOutput { path })
}

fn guided_descent(
    net: &dyn Denoiser,
    z_start: &Latent,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    route: Route,
) -> Result<SampleOutput> {
    descend(net, z_start, plan, |z, t, t_prev| {
        let eps = guided_noise(net, z, t, ctx, route, None)?;
        ddim_step(z, &eps, t, t_prev, sched)
    })
}

/// Plain guided DDIM descent from the inverted latent.
pub fn sample_direct(
    net: &dyn Denoiser,
    z_start: &Latent,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    guided_descent(net, z_start, ctx, plan, sched, Route::Sampling)
}

/// Direct sampling with the unconditional embedding replaced by the conditional one.
pub fn sample_neg_prompt_baseline(
    net: &dyn Denoiser,
    z_start: &Latent,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    guided_descent(net, z_start, &ctx.cond_as_uncond(), plan, sched, Route::Sampling)
}

/// Reference-latent sampling.
///
/// Reconstruction overwrites every step's result with the trajectory latent, so the
/// network output would be discarded and is not computed. Edit mode is the plain
/// descent from `z_T` under the edit context; see [`sample_fec_ref_paired`] for an edit
/// route that follows the reference path.
pub fn sample_fec_ref(
    net: &dyn Denoiser,
    traj: &Trajectory,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    mode: SampleMode<'_>,
) -> Result<SampleOutput> {
    traj.ensure_covers(plan)?;
    match mode {
        SampleMode::Reconstruct => {
            let path = plan
                .trajectory_keys()
                .into_iter()
                .map(|t| Ok((t, traj.get(t)?.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleOutput { path })
        }
        SampleMode::Edit(_) => {
            let (edit, route) = mode.resolve(ctx);
            guided_descent(net, traj.end()?, edit, plan, sched, route)
        }
    }
}

/// Editing alongside a reference-corrected reconstruction route.
///
/// Each step runs the reconstruction route from the reference latent `z_t` and the edit
/// route from `z~_t`, and sets `z~_{t-1} = z_{t-1} + (step(z~_t, eps_edit) - step(z_t, eps_src))`.
/// The edit therefore only contributes its deviation from the source prediction; with
/// identical contexts the output is the reference trajectory bit for bit.
pub fn sample_fec_ref_paired(
    net: &dyn Denoiser,
    traj: &Trajectory,
    source: &GuidanceContext,
    edit: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    traj.ensure_covers(plan)?;
    descend(net, traj.end()?, plan, |z, t, t_prev| {
        let z_ref = traj.get(t)?;
        let eps_src = guided_noise(net, z_ref, t, source, Route::Reconstruction, None)?;
        let eps_edit = guided_noise(net, z, t, edit, Route::Edit, None)?;
        let src_next = ddim_step(z_ref, &eps_src, t, t_prev, sched)?;
        let edit_next = ddim_step(z, &eps_edit, t, t_prev, sched)?;
        let delta = edit_next.zip_map(&src_next, |e, s| e - s)?;
        traj.get(t_prev)?.zip_map(&delta, |r, d| if d == 0.0 { r } else { r + d })
    })
}

/// `mask * live + (1 - mask) * desired`, broadcasting the spatial mask over channels.
fn blend(mask: &[f64], live: &Latent, desired: &Latent) -> Result<Latent> {
    live.ensure_same_shape(desired)?;
    let spatial = mask.len();
    let data = live
        .data()
        .iter()
        .zip(desired.data())
        .enumerate()
        .map(|(i, (&l, &d))| {
            let m = mask[i % spatial];
            m * l + (1.0 - m) * d
        })
        .collect();
    Latent::new(live.shape(), data)
}

/// Desired-noise sampling.
///
/// At each step the noise `eps_t` that lands exactly on the next trajectory latent is
/// solved for. The unconditional prediction is replaced by the one that makes guidance
/// reproduce `eps_t`, blended with the live unconditional prediction through `M_t`.
/// Reconstruction uses `M = 0`. With guidance 1 the unconditional branch has no effect,
/// so the blend is applied to the total noise instead.
pub fn sample_fec_noise(
    net: &dyn Denoiser,
    traj: &Trajectory,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    masks: &mut dyn MaskProvider,
    mode: SampleMode<'_>,
) -> Result<SampleOutput> {
    traj.ensure_covers(plan)?;
    let (ctx, route) = mode.resolve(ctx);
    let shape = net.latent_shape();
    let editing = matches!(mode, SampleMode::Edit(_));
    descend(net, traj.end()?, plan, |z, t, t_prev| {
        let eps_t = desired_noise(z, traj.get(t_prev)?, t, t_prev, sched)?;
        let mut trace = (editing && masks.wants_trace()).then(|| {
            let (h, w) = net.attention_grid();
            AttentionTrace::new(h, w, ctx.cond.n_tokens())
        });
        let eps_c =
            net.forward(z, t, &ctx.cond, &mut EvalHooks::plain(route, Branch::Cond).with_trace(trace.as_mut()))?;
        let mask = if editing {
            let m = masks.mask(t, trace.as_ref(), shape)?;
            validate_mask(&m, shape)?;
            m
        } else {
            vec![0.0; shape.spatial()]
        };
        let live_needed = mask.iter().any(|&m| m != 0.0);

        let eps = if ctx.scale == 1.0 {
            blend(&mask, &eps_c, &eps_t)?
        } else {
            let eps_u_desired = desired_uncond(&eps_t, &eps_c, ctx.scale)?;
            let eps_u = if live_needed {
                let live = net.forward(z, t, &ctx.uncond, &mut EvalHooks::plain(route, Branch::Uncond))?;
                blend(&mask, &live, &eps_u_desired)?
            } else {
                eps_u_desired
            };
            cfg_combine(&eps_c, &eps_u, ctx.scale)?
        };
        ddim_step(z, &eps, t, t_prev, sched)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvReuseOptions {
    pub layers: LayerRange,
    /// Inject only V, keeping the live keys.
    pub values_only: bool,
}

impl KvReuseOptions {
    pub fn full(layers: usize) -> Self {
        Self { layers: LayerRange::full(layers), values_only: false }
    }

    pub fn values_only(layers: usize) -> Self {
        Self { layers: LayerRange::full(layers), values_only: true }
    }
}

/// DDIM descent in which every evaluation reads self-attention K/V (or V alone) from the
/// inversion cache; each guidance branch uses the entries captured on that branch.
#[allow(clippy::too_many_arguments)]
pub fn sample_fec_kv_reuse(
    net: &dyn Denoiser,
    z_start: &Latent,
    cache: &KvCache,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    opts: KvReuseOptions,
    mode: SampleMode<'_>,
) -> Result<SampleOutput> {
    let (ctx, route) = mode.resolve(ctx);
    opts.layers.validate(net.layer_count())?;
    let branches: &[Branch] = if ctx.scale == 1.0 { &[Branch::Cond] } else { &[Branch::Cond, Branch::Uncond] };
    for &t in plan.timesteps() {
        for layer in opts.layers.start..opts.layers.end {
            for &b in branches {
                cache.get(t, layer, b)?;
            }
        }
    }
    descend(net, z_start, plan, |z, t, t_prev| {
        let eps = guided_noise_inject(net, z, t, ctx, route, cache, opts.layers, opts.values_only)?;
        ddim_step(z, &eps, t, t_prev, sched)
    })
}
