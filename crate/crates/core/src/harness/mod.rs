//! Experiment runner: synthetic data, sweeps, ablations, batch-invariance and timing
//! checks, and report files.

mod checks;
mod config;
mod report;
mod sweep;

pub use checks::{
    batched_direct, batched_invert, check_batch_invariance, report_timing, run_ablation_v_only, BatchCheck,
    BatchReport, TimingReport, TimingRow, REFERENCE_BATCH_THRESHOLD,
};
pub use config::{
    parse_entries, parse_layer_range, ExperimentConfig, LatentKind, MaskSpec, Method, Precision, PromptType,
    CONFIG_KEYS,
};
pub use report::{format_metric, report_json, write_csv, write_json, CSV_COLUMNS};
pub use sweep::{run_method, run_sweep, Aggregate, SweepReport, SweepRow};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{PromptEmbedder, ToyDenoiser};
use crate::editing::EditMask;
use crate::error::Result;
use crate::latent::{Latent, LatentShape};
use crate::schedule::{build_schedule, timestep_plan, NoiseSchedule, TimestepPlan};

/// Deterministic test latent.
///
/// `gaussian` draws i.i.d. standard normals; `blocks` fills a 4 x 4 grid of rectangles
/// with one normal value per channel and block; `gradient` is a per-channel plane
/// `c + a * v + b * u` over coordinates `u, v` spanning `[-1, 1]`.
pub fn generate_synthetic_latent(seed: u64, kind: LatentKind, shape: LatentShape) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    match kind {
        LatentKind::Gaussian => Latent::from_fn(shape, |_, _, _| normal()),
        LatentKind::Blocks => {
            let (by, bx) = (shape.height.div_ceil(4).max(1), shape.width.div_ceil(4).max(1));
            let (ny, nx) = (shape.height.div_ceil(by), shape.width.div_ceil(bx));
            let values: Vec<f64> = (0..shape.channels * ny * nx).map(|_| normal()).collect();
            Latent::from_fn(shape, |c, y, x| values[(c * ny + y / by) * nx + x / bx])
        }
        LatentKind::Gradient => {
            let coeffs: Vec<(f64, f64, f64)> =
                (0..shape.channels).map(|_| (normal(), normal(), 0.5 * normal())).collect();
            let coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            Latent::from_fn(shape, |c, y, x| {
                let (a, b, off) = coeffs[c];
                off + a * coord(y, shape.height) + b * coord(x, shape.width)
            })
        }
    }
}

/// Shared pieces every harness command derives from a config.
pub struct Setup {
    pub sched: NoiseSchedule,
    pub plan: TimestepPlan,
    pub embedder: PromptEmbedder,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sched: build_schedule(cfg.schedule, cfg.train_steps)?,
            plan: timestep_plan(cfg.steps, cfg.train_steps)?,
            embedder: PromptEmbedder::new(cfg.embed_seed),
        })
    }

    pub fn network(&self, cfg: &ExperimentConfig, seed: u64) -> Result<ToyDenoiser> {
        ToyDenoiser::new(cfg.denoiser_for(seed))
    }

    pub fn source(&self, cfg: &ExperimentConfig, seed: u64) -> Latent {
        generate_synthetic_latent(seed.wrapping_add(cfg.data_seed_offset), cfg.data_kind, cfg.latent_shape())
    }
}

/// Resolves a mask spec against the latent grid.
pub fn load_mask(spec: &MaskSpec, shape: LatentShape) -> Result<EditMask> {
    match spec {
        MaskSpec::File(path) => EditMask::load(path),
        &MaskSpec::Box { y0, y1, x0, x1 } => EditMask::rect(shape.height, shape.width, y0, y1, x0, x1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_latents() {
        let shape = LatentShape::default();
        for kind in [LatentKind::Gaussian, LatentKind::Blocks, LatentKind::Gradient] {
            assert!(generate_synthetic_latent(3, kind, shape).bit_eq(&generate_synthetic_latent(3, kind, shape)));
        }
        let b = generate_synthetic_latent(1, LatentKind::Blocks, shape);
        let block = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).map(|(y, x)| b.get(0, y, x));
        assert!(block.clone().all(|v| v == b.get(0, 0, 0)));
        assert_ne!(b.get(0, 0, 0), b.get(0, 0, 4));
        let g = generate_synthetic_latent(1, LatentKind::Gradient, shape);
        let step = g.get(0, 0, 1) - g.get(0, 0, 0);
        assert!((g.get(0, 0, 15) - g.get(0, 0, 14) - step).abs() < 1e-12);
        assert!("noise".parse::<LatentKind>().is_err());
    }
}
