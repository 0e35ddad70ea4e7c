use std::time::Instant;

use rayon::prelude::*;

use super::sweep::{run_sweep, SweepReport, SweepRow};
use super::{load_mask, ExperimentConfig, Method, PromptType, Setup};
use crate::denoiser::{predict_noise, predict_noise_batch, Counted, Denoiser, LayerRange, Route};
use crate::editing::{run_edit, EditMask, EditMethod, EditRequest};
use crate::error::Result;
use crate::latent::Latent;
use crate::metrics::MetricsReport;
use crate::sampling::{
    cfg_combine, ddim_invert_step, ddim_step, invert, sample_direct, sample_fec_kv_reuse, sample_fec_noise,
    sample_fec_ref, sample_fec_ref_paired, CaptureOptions, GuidanceContext, KvCapture, KvReuseOptions, SampleMode,
    ZeroMask,
};
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// Output gap at which serial and parallel evaluation were observed to diverge on GPU
/// hardware. Reported as context only; the checks demand exact equality.
pub const REFERENCE_BATCH_THRESHOLD: f64 = 1e-5;

fn batched_guided(net: &dyn Denoiser, zs: &[Latent], t: usize, ctx: &GuidanceContext) -> Result<Vec<Latent>> {
    let eps_c = predict_noise_batch(net, zs, t, &ctx.cond)?;
    if ctx.collapses() {
        return Ok(eps_c);
    }
    let eps_u = predict_noise_batch(net, zs, t, &ctx.uncond)?;
    eps_c.iter().zip(&eps_u).map(|(c, u)| cfg_combine(c, u, ctx.scale)).collect()
}

/// Direct sampling of several latents in lockstep, one batched evaluation per branch and
/// step. Returns the final latents.
pub fn batched_direct(
    net: &dyn Denoiser,
    starts: &[Latent],
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    let mut zs = starts.to_vec();
    for (t, t_prev) in plan.sampling_pairs() {
        let eps = batched_guided(net, &zs, t, ctx)?;
        zs = zs.iter().zip(&eps).map(|(z, e)| ddim_step(z, e, t, t_prev, sched)).collect::<Result<_>>()?;
    }
    Ok(zs)
}

/// Batched counterpart of [`invert`] without capture. Returns the inverted end latents.
pub fn batched_invert(
    net: &dyn Denoiser,
    sources: &[Latent],
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    let mut zs = sources.to_vec();
    for (t_prev, t) in plan.inversion_pairs() {
        let eps = batched_guided(net, &zs, t, ctx)?;
        zs = zs.iter().zip(&eps).map(|(z, e)| ddim_invert_step(z, e, t_prev, t, sched)).collect::<Result<_>>()?;
    }
    Ok(zs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchCheck {
    pub name: String,
    pub bit_identical: bool,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub checks: Vec<BatchCheck>,
    pub reference_threshold: f64,
}

impl BatchReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.bit_identical)
    }
}

fn compare(name: &str, a: &[Latent], b: &[Latent]) -> Result<BatchCheck> {
    let mut max_abs_diff: f64 = 0.0;
    let mut bit_identical = a.len() == b.len();
    for (x, y) in a.iter().zip(b) {
        max_abs_diff = max_abs_diff.max(x.max_abs_diff(y)?);
        bit_identical &= x.bit_eq(y);
    }
    Ok(BatchCheck { name: name.into(), bit_identical, max_abs_diff })
}

/// Runs the same sessions batched, sequentially and on worker threads, and compares the
/// results bit for bit. Uses the first seed's network, up to four sources and the
/// largest configured sampling scale.
pub fn check_batch_invariance(cfg: &ExperimentConfig) -> Result<BatchReport> {
    let setup = Setup::new(cfg)?;
    let net = setup.network(cfg, cfg.seeds[0])?;
    let scale = cfg.sampling_guidance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ctx = GuidanceContext::new(scale, setup.embedder.embed(&cfg.prompt), setup.embedder.null())?;
    let sources: Vec<Latent> = (0..4.min(cfg.seeds.len()).max(2))
        .map(|i| setup.source(cfg, cfg.seeds.get(i).copied().unwrap_or(cfg.seeds[0])))
        .collect();
    let (plan, sched) = (&setup.plan, &setup.sched);
    let mut checks = Vec::new();

    let t = plan.start();
    let pair = vec![sources[0].clone(), sources[0].clone()];
    let batched = predict_noise_batch(&net, &pair, t, &ctx.cond)?;
    let single = predict_noise(&net, &sources[0], t, &ctx.cond)?;
    checks.push(compare("forward batch of 2 copies", &batched, &[single.clone(), single])?);

    let ends_batched = batched_invert(&net, &sources, &ctx, plan, sched)?;
    let ends_seq = sources
        .iter()
        .map(|z| invert(&net, z, &ctx, plan, sched, CaptureOptions::default(), 0)?.trajectory.end().cloned())
        .collect::<Result<Vec<_>>>()?;
    checks.push(compare("inversion batched vs sequential", &ends_batched, &ends_seq)?);

    let seq = ends_seq
        .iter()
        .map(|z| sample_direct(&net, z, &ctx, plan, sched).map(|o| o.into_final()))
        .collect::<Result<Vec<_>>>()?;
    let batched = batched_direct(&net, &ends_seq, &ctx, plan, sched)?;
    checks.push(compare(&format!("{}-step direct batched vs sequential", plan.steps()), &batched, &seq)?);

    let threaded = ends_seq
        .par_iter()
        .map(|z| sample_direct(&net, z, &ctx, plan, sched).map(|o| o.into_final()))
        .collect::<Result<Vec<_>>>()?;
    checks.push(compare(&format!("{}-step direct threaded vs sequential", plan.steps()), &threaded, &seq)?);

    Ok(BatchReport { checks, reference_threshold: REFERENCE_BATCH_THRESHOLD })
}

/// Reconstruction sweep over fec-kv-reuse, fec-v-reuse and direct. When an edit prompt
/// is configured, v-only edits are also run and listed as mechanism-only rows.
pub fn run_ablation_v_only(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let ablation = ExperimentConfig {
        methods: vec![Method::FecKvReuse, Method::FecVReuse, Method::Direct],
        ..cfg.clone()
    };
    let mut report = run_sweep(&ablation)?;
    let Some(edit_prompt) = &cfg.edit_prompt else {
        return Ok(report);
    };
    let setup = Setup::new(cfg)?;
    for &seed in &cfg.seeds {
        for &scale in &cfg.sampling_guidance {
            let inversion = cfg.inversion_guidance.as_ref().and_then(|v| v.first().copied()).unwrap_or(scale);
            let req = EditRequest {
                source_prompt: cfg.prompt.clone(),
                edit_prompt: edit_prompt.clone(),
                blend_word: None,
                method: EditMethod::FecVReuse,
                layers: cfg.layers,
                guidance: scale,
                inversion_guidance: inversion,
                mask: None,
            };
            let source = setup.source(cfg, seed);
            let started = Instant::now();
            let result = setup
                .network(cfg, seed)
                .and_then(|net| run_edit(&net, &req, &source, &setup.plan, &setup.sched, &setup.embedder))
                .and_then(|(out, rep)| MetricsReport::compute(&out, &source, rep.per_step_losses));
            let sampling_ms = started.elapsed().as_secs_f64() * 1e3;
            let (metrics, error) = match result {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            report.mechanism_only.push(SweepRow {
                method: Method::FecVReuse.name().into(),
                inversion_guidance: inversion,
                sampling_guidance: scale,
                prompt_type: PromptType::NonEmpty,
                seed,
                metrics,
                inversion_ms: 0.0,
                sampling_ms,
                mechanism_only: true,
                error,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub path: String,
    pub millis: f64,
    /// Network evaluations per route.
    pub calls: Vec<(Route, u64)>,
}

impl TimingRow {
    pub fn total_calls(&self) -> u64 {
        self.calls.iter().map(|(_, n)| n).sum()
    }

    pub fn calls_on(&self, route: Route) -> u64 {
        self.calls.iter().find(|(r, _)| *r == route).map_or(0, |(_, n)| *n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub steps: usize,
    pub guidance: f64,
    pub rows: Vec<TimingRow>,
    /// Failed call-count assertions; empty when all hold.
    pub violations: Vec<String>,
}

impl TimingReport {
    pub fn row(&self, path: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Wall-clock and call counts per path on the first seed, at the largest configured
/// sampling scale. Checks that the kv-reuse edit makes no reconstruction-route calls
/// and half as many calls as the paired reference editor.
pub fn report_timing(cfg: &ExperimentConfig) -> Result<TimingReport> {
    let setup = Setup::new(cfg)?;
    let seed = cfg.seeds[0];
    let net = Counted::new(setup.network(cfg, seed)?);
    let source = setup.source(cfg, seed);
    let scale = cfg.sampling_guidance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let null = setup.embedder.null();
    let ctx = GuidanceContext::new(scale, setup.embedder.embed(&cfg.prompt), null.clone())?;
    let edit_text = cfg.edit_prompt.clone().unwrap_or_else(|| "a photo of a dog".into());
    let edit = GuidanceContext::new(scale, setup.embedder.embed(&edit_text), null)?;
    let shape = cfg.latent_shape();
    let mask = match &cfg.mask {
        Some(spec) => load_mask(spec, shape)?,
        None => EditMask::rect(
            shape.height,
            shape.width,
            shape.height / 4,
            3 * shape.height / 4,
            shape.width / 4,
            3 * shape.width / 4,
        )?,
    };
    let layers = cfg.layers.unwrap_or(LayerRange::full(net.layer_count()));
    let (plan, sched) = (&setup.plan, &setup.sched);

    let mut rows = Vec::new();
    let mut measure = |path: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        net.counter().reset();
        let started = Instant::now();
        f()?;
        let millis = started.elapsed().as_secs_f64() * 1e3;
        rows.push(TimingRow { path: path.into(), millis, calls: net.counter().snapshot() });
        Ok(())
    };

    let capture = CaptureOptions { kv: KvCapture::TwoPass, trace: false };
    let mut inv = None;
    measure("invert", &mut || {
        inv = Some(invert(&net, &source, &ctx, plan, sched, capture, seed)?);
        Ok(())
    })?;
    let inv = inv.expect("set by the closure");
    let traj = &inv.trajectory;
    let cache = inv.kv.as_ref().expect("captured");
    let z_t = traj.end()?;
    let kv = KvReuseOptions { layers, values_only: false };

    measure("direct", &mut || sample_direct(&net, z_t, &ctx, plan, sched).map(drop))?;
    measure("fec-ref", &mut || sample_fec_ref(&net, traj, &ctx, plan, sched, SampleMode::Reconstruct).map(drop))?;
    measure("fec-noise", &mut || {
        sample_fec_noise(&net, traj, &ctx, plan, sched, &mut ZeroMask, SampleMode::Reconstruct).map(drop)
    })?;
    measure("fec-kv-reuse", &mut || {
        sample_fec_kv_reuse(&net, z_t, cache, &ctx, plan, sched, kv, SampleMode::Reconstruct).map(drop)
    })?;
    measure("edit:fec-kv-reuse", &mut || {
        sample_fec_kv_reuse(&net, z_t, cache, &ctx, plan, sched, kv, SampleMode::Edit(&edit)).map(drop)
    })?;
    measure("edit:fec-ref-paired", &mut || sample_fec_ref_paired(&net, traj, &ctx, &edit, plan, sched).map(drop))?;
    measure("edit:fec-noise", &mut || {
        let mut m = mask.clone();
        sample_fec_noise(&net, traj, &ctx, plan, sched, &mut m, SampleMode::Edit(&edit)).map(drop)
    })?;

    let report_rows = rows;
    let mut violations = Vec::new();
    let branches = if edit.collapses() { 1 } else { 2 };
    let kv_edit = report_rows.iter().find(|r| r.path == "edit:fec-kv-reuse").expect("measured");
    let paired = report_rows.iter().find(|r| r.path == "edit:fec-ref-paired").expect("measured");
    let expected = (plan.steps() * branches) as u64;
    if kv_edit.calls_on(Route::Reconstruction) != 0 {
        violations.push(format!(
            "kv-reuse edit made {} reconstruction-route calls",
            kv_edit.calls_on(Route::Reconstruction)
        ));
    }
    if kv_edit.total_calls() != expected {
        violations.push(format!("kv-reuse edit made {} calls, expected {expected}", kv_edit.total_calls()));
    }
    if paired.total_calls() != 2 * kv_edit.total_calls() {
        violations.push(format!(
            "paired edit made {} calls, expected twice the kv-reuse edit's {}",
            paired.total_calls(),
            kv_edit.total_calls()
        ));
    }
    Ok(TimingReport { steps: plan.steps(), guidance: scale, rows: report_rows, violations })
}
