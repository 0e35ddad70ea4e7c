use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use super::{ExperimentConfig, Method, Precision, PromptType, Setup};
use crate::denoiser::{Denoiser, LayerRange};
use crate::error::Result;
use crate::latent::Latent;
use crate::metrics::{trajectory_loss_curve, MetricsReport};
use crate::sampling::{
    invert, sample_direct, sample_fec_kv_reuse, sample_fec_noise, sample_fec_ref, sample_neg_prompt_baseline,
    CaptureOptions, GuidanceContext, InversionOutput, KvCapture, KvReuseOptions, SampleMode, SampleOutput, ZeroMask,
};
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// One sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub inversion_guidance: f64,
    pub sampling_guidance: f64,
    pub prompt_type: PromptType,
    pub seed: u64,
    /// `None` when the cell failed; see `error`.
    pub metrics: Option<MetricsReport>,
    pub inversion_ms: f64,
    pub sampling_ms: f64,
    pub mechanism_only: bool,
    pub error: Option<String>,
}

/// Mean metrics over the seeds of one (method, inversion scale, sampling scale, prompt
/// type) group; failed cells are counted but excluded from the means.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub inversion_guidance: f64,
    pub sampling_guidance: f64,
    pub prompt_type: PromptType,
    pub cells: usize,
    pub failures: usize,
    pub mean_latent_loss: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Edit-mode runs executed only to exercise a mechanism.
    pub mechanism_only: Vec<SweepRow>,
}

fn method_rank(name: &str) -> usize {
    Method::ALL.iter().position(|m| m.name() == name).unwrap_or(Method::ALL.len())
}

impl SweepReport {
    pub fn sort(&mut self) {
        // Seeds vary fastest within a group.
        self.rows.sort_by(|a, b| {
            (method_rank(&a.method), &a.method, a.prompt_type)
                .cmp(&(method_rank(&b.method), &b.method, b.prompt_type))
                .then(a.inversion_guidance.total_cmp(&b.inversion_guidance))
                .then(a.sampling_guidance.total_cmp(&b.sampling_guidance))
                .then(a.seed.cmp(&b.seed))
        });
    }

    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: Vec<Aggregate> = Vec::new();
        let mut index: BTreeMap<(String, u64, u64, PromptType), usize> = BTreeMap::new();
        let mut sums: Vec<(f64, f64, f64)> = Vec::new();
        for row in &self.rows {
            let key = (
                row.method.clone(),
                row.inversion_guidance.to_bits(),
                row.sampling_guidance.to_bits(),
                row.prompt_type,
            );
            let i = *index.entry(key).or_insert_with(|| {
                groups.push(Aggregate {
                    method: row.method.clone(),
                    inversion_guidance: row.inversion_guidance,
                    sampling_guidance: row.sampling_guidance,
                    prompt_type: row.prompt_type,
                    cells: 0,
                    failures: 0,
                    mean_latent_loss: 0.0,
                    mean_psnr: 0.0,
                    mean_ssim: 0.0,
                });
                sums.push((0.0, 0.0, 0.0));
                groups.len() - 1
            });
            groups[i].cells += 1;
            match &row.metrics {
                Some(m) => {
                    sums[i].0 += m.latent_loss;
                    sums[i].1 += m.psnr;
                    sums[i].2 += m.ssim;
                }
                None => groups[i].failures += 1,
            }
        }
        for (g, (l, p, s)) in groups.iter_mut().zip(sums) {
            let n = (g.cells - g.failures) as f64;
            if n > 0.0 {
                g.mean_latent_loss = l / n;
                g.mean_psnr = p / n;
                g.mean_ssim = s / n;
            } else {
                (g.mean_latent_loss, g.mean_psnr, g.mean_ssim) = (f64::NAN, f64::NAN, f64::NAN);
            }
        }
        groups
    }
}

/// Reconstructs the inverted source with `method`.
#[allow(clippy::too_many_arguments)]
pub fn run_method(
    net: &dyn Denoiser,
    method: Method,
    inv: &InversionOutput,
    ctx: &GuidanceContext,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    layers: Option<LayerRange>,
) -> Result<SampleOutput> {
    let traj = &inv.trajectory;
    let z_t = traj.end()?;
    match method {
        Method::Direct => sample_direct(net, z_t, ctx, plan, sched),
        Method::NegPrompt => sample_neg_prompt_baseline(net, z_t, ctx, plan, sched),
        Method::FecRef => sample_fec_ref(net, traj, ctx, plan, sched, SampleMode::Reconstruct),
        Method::FecNoise => sample_fec_noise(net, traj, ctx, plan, sched, &mut ZeroMask, SampleMode::Reconstruct),
        Method::FecKvReuse | Method::FecVReuse => {
            let cache = inv.kv.as_ref().ok_or_else(|| {
                crate::error::FecError::InvalidRequest("KV methods need an inversion with capture".into())
            })?;
            let layers = layers.unwrap_or(LayerRange::full(net.layer_count()));
            let opts = KvReuseOptions { layers, values_only: method == Method::FecVReuse };
            sample_fec_kv_reuse(net, z_t, cache, ctx, plan, sched, opts, SampleMode::Reconstruct)
        }
    }
}

fn score(out: &SampleOutput, inv: &InversionOutput, source: &Latent, precision: Precision) -> Result<MetricsReport> {
    match precision {
        Precision::F64 => {
            let curve = trajectory_loss_curve(out, &inv.trajectory)?;
            MetricsReport::compute(out.final_latent(), source, curve)
        }
        Precision::F32 => {
            let rounded = SampleOutput { path: out.path.iter().map(|(t, z)| (*t, z.to_f32_precision())).collect() };
            let curve = trajectory_loss_curve(&rounded, &inv.trajectory.to_f32_precision())?;
            MetricsReport::compute(rounded.final_latent(), &source.to_f32_precision(), curve)
        }
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn run_group(cfg: &ExperimentConfig, setup: &Setup, prompt_type: PromptType, seed: u64) -> Vec<SweepRow> {
    let row = |method: &str, inv_w: f64, samp_w: f64| SweepRow {
        method: method.to_string(),
        inversion_guidance: inv_w,
        sampling_guidance: samp_w,
        prompt_type,
        seed,
        metrics: None,
        inversion_ms: 0.0,
        sampling_ms: 0.0,
        mechanism_only: false,
        error: None,
    };
    let pairs: Vec<(f64, Vec<f64>)> = match &cfg.inversion_guidance {
        None => cfg.sampling_guidance.iter().map(|&w| (w, vec![w])).collect(),
        Some(inv) => inv.iter().map(|&w| (w, cfg.sampling_guidance.clone())).collect(),
    };
    let fail_all = |msg: String| -> Vec<SweepRow> {
        pairs
            .iter()
            .flat_map(|(iw, sws)| sws.iter().map(move |&sw| (*iw, sw)))
            .flat_map(|(iw, sw)| cfg.methods.iter().map(move |m| (m, iw, sw)))
            .map(|(m, iw, sw)| SweepRow { error: Some(msg.clone()), ..row(m.name(), iw, sw) })
            .collect()
    };
    let net = match setup.network(cfg, seed) {
        Ok(n) => n,
        Err(e) => return fail_all(e.to_string()),
    };
    let source = setup.source(cfg, seed);
    let cond = match prompt_type {
        PromptType::Empty => setup.embedder.null(),
        PromptType::NonEmpty => setup.embedder.embed(&cfg.prompt),
    };
    let null = setup.embedder.null();
    let kv = if cfg.methods.iter().any(|m| m.needs_kv()) { cfg.kv_capture } else { KvCapture::Off };

    let mut rows = Vec::new();
    for (inv_w, samp_ws) in pairs {
        let started = Instant::now();
        let inv = GuidanceContext::new(inv_w, cond.clone(), null.clone()).and_then(|ctx| {
            invert(&net, &source, &ctx, &setup.plan, &setup.sched, CaptureOptions { kv, trace: false }, seed)
        });
        let inversion_ms = ms(started);
        let inv = match inv {
            Ok(inv) => inv,
            Err(e) => {
                for &sw in &samp_ws {
                    for m in &cfg.methods {
                        rows.push(SweepRow { error: Some(e.to_string()), inversion_ms, ..row(m.name(), inv_w, sw) });
                    }
                }
                continue;
            }
        };
        for &samp_w in &samp_ws {
            for &method in &cfg.methods {
                let started = Instant::now();
                let result = GuidanceContext::new(samp_w, cond.clone(), null.clone())
                    .and_then(|ctx| run_method(&net, method, &inv, &ctx, &setup.plan, &setup.sched, cfg.layers));
                let sampling_ms = ms(started);
                let (metrics, error) = match result.and_then(|out| score(&out, &inv, &source, cfg.precision)) {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                rows.push(SweepRow { metrics, error, inversion_ms, sampling_ms, ..row(method.name(), inv_w, samp_w) });
            }
        }
    }
    rows
}

/// Inverts and reconstructs every (prompt type, seed, guidance, method) cell. Cell
/// failures are recorded in their rows. Groups run in parallel; rows come back sorted.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let setup = Setup::new(cfg)?;
    let jobs: Vec<(PromptType, u64)> =
        cfg.prompt_types.iter().flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    let rows: Vec<SweepRow> =
        jobs.par_iter().map(|&(p, s)| run_group(cfg, &setup, p, s)).collect::<Vec<_>>().into_iter().flatten().collect();
    let mut report = SweepReport { rows, mechanism_only: Vec::new() };
    report.sort();
    Ok(report)
}
