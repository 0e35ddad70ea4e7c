use std::collections::BTreeMap;

use fec_core::harness::*;
use fec_core::latent::LatentShape;

fn small(methods: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("experiment.methods", methods),
        ("experiment.steps", "6"),
        ("experiment.seeds", "0..3"),
        ("experiment.sampling_guidance", "1, 7.5"),
        ("model.layers", "2"),
        ("prompts.types", "empty, non-empty"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn gaussian_latents_have_unit_moments() {
    let shape = LatentShape::new(4, 16, 16);
    let mut values = Vec::new();
    for seed in 0..977 {
        values.extend_from_slice(generate_synthetic_latent(seed, LatentKind::Gaussian, shape).data());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn sweep_aggregates_match_brute_force() {
    let cfg = small("direct, fec-ref, fec-noise, fec-kv-reuse");
    let report = run_sweep(&cfg).unwrap();
    assert_eq!(report.rows.len(), 4 * 2 * 2 * 3);
    assert!(report.rows.iter().all(|r| r.error.is_none() && !r.mechanism_only));

    let mut groups: BTreeMap<(String, String, u64, u64), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        let key = (r.method.clone(), r.prompt_type.name().to_string(), r.inversion_guidance.to_bits(), r.sampling_guidance.to_bits());
        groups.entry(key).or_default().push(r.metrics.as_ref().unwrap().latent_loss);
    }
    let aggregates = report.aggregate();
    assert_eq!(aggregates.len(), groups.len());
    for a in &aggregates {
        let key = (a.method.clone(), a.prompt_type.name().to_string(), a.inversion_guidance.to_bits(), a.sampling_guidance.to_bits());
        let losses = &groups[&key];
        assert_eq!(a.cells, 3);
        assert_eq!(a.failures, 0);
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((a.mean_latent_loss - mean).abs() <= 1e-15 * mean.abs().max(1.0));
    }
    for r in report.rows.iter().filter(|r| r.method == "fec-ref") {
        let m = r.metrics.as_ref().unwrap();
        assert_eq!(m.latent_loss, 0.0);
        assert_eq!(m.psnr, f64::INFINITY);
        assert_eq!(m.ssim, 1.0);
        assert!(m.per_step_losses.iter().all(|&(_, l)| l == 0.0));
    }
    // Tied guidance: every row inverts at the sampling scale.
    assert!(report.rows.iter().all(|r| r.inversion_guidance == r.sampling_guidance));
}

#[test]
fn sweeps_are_deterministic_apart_from_timings() {
    let cfg = small("direct, fec-v-reuse");
    let strip = |mut r: SweepReport| {
        for row in &mut r.rows {
            row.inversion_ms = 0.0;
            row.sampling_ms = 0.0;
        }
        r
    };
    assert_eq!(strip(run_sweep(&cfg).unwrap()).rows, strip(run_sweep(&cfg).unwrap()).rows);
}

#[test]
fn untied_guidance_crosses_both_axes() {
    let mut cfg = small("direct");
    cfg.set("experiment.inversion_guidance", "1, 3, 7.5").unwrap();
    cfg.set("prompts.types", "non-empty").unwrap();
    let report = run_sweep(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3 * 2 * 3);
    let pairs: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.inversion_guidance, r.sampling_guidance)).collect();
    assert!(pairs.contains(&(3.0, 7.5)) && pairs.contains(&(7.5, 1.0)));
}

#[test]
fn cell_failures_are_recorded_not_fatal() {
    let mut cfg = small("direct, fec-kv-reuse");
    cfg.set("edit.layers", "0..9").unwrap();
    cfg.set("prompts.types", "non-empty").unwrap();
    let report = run_sweep(&cfg).unwrap();
    let (bad, good): (Vec<_>, Vec<_>) = report.rows.iter().partition(|r| r.method == "fec-kv-reuse");
    assert!(bad.iter().all(|r| r.error.is_some() && r.metrics.is_none()));
    assert!(good.iter().all(|r| r.error.is_none() && r.metrics.is_some()));
    let agg = report.aggregate();
    let kv = agg.iter().find(|a| a.method == "fec-kv-reuse").unwrap();
    assert_eq!(kv.failures, kv.cells);
    assert!(kv.mean_latent_loss.is_nan());

    let mut csv = Vec::new();
    write_csv(&mut csv, &report).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 1 + report.rows.len());
}

#[test]
fn config_files_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# shared settings\n\
         [experiment]\n\
         steps = 12\n\
         seeds = 4, 9\n\
         precision = 32\n\
         [model]\n\
         layers = 3\n\
         output_gain = 0.5\n\
         [data]\n\
         kind = blocks\n",
    )
    .unwrap();
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.steps, 12);
    assert_eq!(cfg.seeds, vec![4, 9]);
    assert_eq!(cfg.precision, Precision::F32);
    assert_eq!(cfg.denoiser.layer_count, 3);
    assert_eq!(cfg.denoiser.output_gain, 0.5);
    assert_eq!(cfg.data_kind, LatentKind::Blocks);
    cfg.set("experiment.steps", "7").unwrap();
    assert_eq!(cfg.steps, 7);

    for key in CONFIG_KEYS {
        if let Err(e) = ExperimentConfig::default().set(key, "###") {
            assert!(!e.to_string().contains("unknown config key"), "{key}");
        }
    }
    assert!(ExperimentConfig::default().set("model.depth", "2").is_err());
    let err = ExperimentConfig::parse("[experiment]\nsteps = 10\nbogus = 1\n").unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
    assert!(ExperimentConfig::parse("[model\n").is_err());
    assert!(ExperimentConfig::parse("steps = 0\n").is_err());
}

#[test]
fn single_precision_sweep_reports_rounded_scores() {
    let mut cfg = small("fec-noise");
    cfg.set("experiment.precision", "32").unwrap();
    cfg.set("prompts.types", "non-empty").unwrap();
    let report = run_sweep(&cfg).unwrap();
    for r in &report.rows {
        let m = r.metrics.as_ref().unwrap();
        assert!(m.latent_loss < 1e-12, "{}", m.latent_loss);
    }
}
