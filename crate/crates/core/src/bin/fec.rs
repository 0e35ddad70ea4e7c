use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fec_core::denoiser::{Denoiser, LayerRange};
use fec_core::editing::{run_edit, EditMethod, EditRequest};
use fec_core::harness::{
    check_batch_invariance, format_metric, load_mask, report_timing, run_ablation_v_only, run_method, run_sweep,
    write_csv, write_json, ExperimentConfig, Method, Setup, SweepReport,
};
use fec_core::latent::Latent;
use fec_core::metrics::{trajectory_loss_curve, MetricsReport};
use fec_core::sampling::{invert, CaptureOptions, GuidanceContext, KvCapture, SampleOutput, Trajectory};
use fec_core::schedule::TimestepPlan;

#[derive(Parser)]
#[command(name = "fec", version, about = "Exact-reconstruction DDIM inversion and editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert one synthetic latent and save its trajectory and KV cache.
    Invert(Opts),
    /// Invert one synthetic latent and reconstruct it with each configured method.
    Reconstruct(Opts),
    /// Invert under the source prompt and edit towards the edit prompt.
    Edit(Opts),
    /// Run the reconstruction sweep and write sweep.csv / sweep.json.
    Sweep(Opts),
    /// Compare kv-reuse, v-only reuse and direct sampling.
    Ablate(Opts),
    /// Compare batched, sequential and threaded runs bit for bit.
    CheckBatch(Opts),
    /// Wall-clock and network-call counts per sampling path.
    Timing(Opts),
}

#[derive(Args, Clone, Default)]
struct Opts {
    /// Config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.layers=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Method list (sweep) or edit method (edit).
    #[arg(long)]
    method: Option<String>,
    /// Sampling guidance scale(s), comma separated.
    #[arg(long)]
    guidance: Option<String>,
    /// Inversion guidance scale(s); defaults to the sampling scale.
    #[arg(long = "inv-guidance")]
    inv_guidance: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Seed list, e.g. `3` or `0..10`.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long = "edit-prompt")]
    edit_prompt: Option<String>,
    #[arg(long = "blend-word")]
    blend_word: Option<String>,
    /// FECMASK1 file or `box:y0,y1,x0,x1`.
    #[arg(long)]
    mask: Option<String>,
    /// Injected layers, `start..end`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Opts {
    fn config(&self, edit: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for item in &self.set {
            let (k, v) = item.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
            cfg.set(k.trim(), v)?;
        }
        let flags = [
            (if edit { "edit.method" } else { "experiment.methods" }, self.method.as_deref()),
            ("experiment.sampling_guidance", self.guidance.as_deref()),
            ("experiment.inversion_guidance", self.inv_guidance.as_deref()),
            ("experiment.seeds", self.seed.as_deref()),
            ("prompts.source", self.prompt.as_deref()),
            ("prompts.edit", self.edit_prompt.as_deref()),
            ("edit.blend_word", self.blend_word.as_deref()),
            ("edit.mask", self.mask.as_deref()),
            ("edit.layers", self.layers.as_deref()),
            ("experiment.precision", self.precision.as_deref()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("fec-out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn first_scales(cfg: &ExperimentConfig) -> (f64, f64) {
    let samp = cfg.sampling_guidance[0];
    let inv = cfg.inversion_guidance.as_ref().map_or(samp, |v| v[0]);
    (inv, samp)
}

fn save_path(output: &SampleOutput, traj: &Trajectory, guidance: f64, seed: u64, path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut saved = Trajectory::new(traj.plan().clone(), guidance, seed, output.final_latent().clone());
    for (t, z) in &output.path {
        saved.insert(*t, z.clone())?;
    }
    saved.save(path, cfg.precision.width())?;
    Ok(())
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: latent_loss={} psnr={} ssim={}",
        format_metric(m.latent_loss),
        format_metric(m.psnr),
        format_metric(m.ssim)
    );
}

fn maybe_round(cfg: &ExperimentConfig, z: &Latent) -> Latent {
    match cfg.precision {
        fec_core::harness::Precision::F32 => z.to_f32_precision(),
        fec_core::harness::Precision::F64 => z.clone(),
    }
}

fn cmd_invert(cfg: &ExperimentConfig, reconstruct: bool) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let dir = out_dir(cfg)?;
    let seed = cfg.seeds[0];
    let net = setup.network(cfg, seed)?;
    let source = setup.source(cfg, seed);
    let (inv_w, samp_w) = first_scales(cfg);
    let (cond, null) = (setup.embedder.embed(&cfg.prompt), setup.embedder.null());
    let needs_kv = !reconstruct || cfg.methods.iter().any(|m| m.needs_kv());
    let capture = CaptureOptions { kv: if needs_kv { cfg.kv_capture } else { KvCapture::Off }, trace: false };
    let ctx = GuidanceContext::new(inv_w, cond.clone(), null.clone())?;
    let inv = invert(&net, &source, &ctx, &setup.plan, &setup.sched, capture, seed)?;
    let traj_path = dir.join("inversion.fectraj");
    inv.trajectory.save(&traj_path, cfg.precision.width())?;
    println!("wrote {}", traj_path.display());
    if let Some(cache) = &inv.kv {
        let kv_path = dir.join("inversion.feckv");
        cache.save(&kv_path, cfg.precision.width())?;
        println!("wrote {} ({} steps x {} layers)", kv_path.display(), cache.steps(), cache.layer_count());
    }
    if !reconstruct {
        return Ok(());
    }
    let samp = GuidanceContext::new(samp_w, cond, null)?;
    for &method in &cfg.methods {
        let out = run_method(&net, method, &inv, &samp, &setup.plan, &setup.sched, cfg.layers)?;
        let curve = trajectory_loss_curve(&out, &inv.trajectory)?;
        let report = MetricsReport::compute(&maybe_round(cfg, out.final_latent()), &maybe_round(cfg, &source), curve)?;
        print_metrics(method.name(), &report);
        let path = dir.join(format!("reconstruct-{}.fectraj", method.name()));
        save_path(&out, &inv.trajectory, samp_w, seed, &path, cfg)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_edit(cfg: &ExperimentConfig) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let dir = out_dir(cfg)?;
    let seed = cfg.seeds[0];
    let net = setup.network(cfg, seed)?;
    let source = setup.source(cfg, seed);
    let (inv_w, samp_w) = first_scales(cfg);
    let Some(edit_prompt) = cfg.edit_prompt.clone() else { bail!("edit needs --edit-prompt") };
    let method: EditMethod = cfg.edit_method.as_deref().unwrap_or("fec-ref").parse()?;
    let mask = cfg.mask.as_ref().map(|spec| load_mask(spec, cfg.latent_shape())).transpose()?;
    let req = EditRequest {
        source_prompt: cfg.prompt.clone(),
        edit_prompt,
        blend_word: cfg.blend_word.clone(),
        method,
        layers: cfg.layers.or(Some(LayerRange::full(net.layer_count()))),
        guidance: samp_w,
        inversion_guidance: inv_w,
        mask: mask.clone(),
    };
    let (edited, report) = run_edit(&net, &req, &source, &setup.plan, &setup.sched, &setup.embedder)?;
    println!("method: {}", report.method);
    println!("source_loss={}", format_metric(report.source_loss));
    if let (Some(o), Some(i)) = (report.outside_mask_loss, report.inside_mask_loss) {
        println!("outside_mask_loss={} inside_mask_loss={}", format_metric(o), format_metric(i));
    }
    if !report.degenerate_mask_steps.is_empty() {
        println!("degenerate mask at t = {:?}", report.degenerate_mask_steps);
    }
    if report.mechanism_only {
        println!("mechanism-only: no edit-quality claim");
    }
    // A zero-step trajectory file holds just the edited latent.
    let saved = Trajectory::new(TimestepPlan::empty(cfg.train_steps), samp_w, seed, edited);
    let path = dir.join(format!("edit-{}.fectraj", method.name()));
    saved.save(&path, cfg.precision.width())?;
    println!("wrote {}", path.display());
    if let Some(m) = mask {
        let mpath = dir.join("edit.fecmask");
        m.save(&mpath, cfg.precision.width())?;
        println!("wrote {}", mpath.display());
    }
    Ok(())
}

fn write_reports(report: &SweepReport, dir: &Path, stem: &str) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(BufWriter::new(File::create(&csv_path)?), report)?;
    let json_path = dir.join(format!("{stem}.json"));
    write_json(BufWriter::new(File::create(&json_path)?), report)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn print_aggregates(report: &SweepReport) {
    println!("method,inversion_guidance,sampling_guidance,prompt_type,cells,failures,mean_latent_loss,mean_psnr,mean_ssim");
    for a in report.aggregate() {
        println!(
            "{},{},{},{},{},{},{},{},{}",
            a.method,
            format_metric(a.inversion_guidance),
            format_metric(a.sampling_guidance),
            a.prompt_type.name(),
            a.cells,
            a.failures,
            format_metric(a.mean_latent_loss),
            format_metric(a.mean_psnr),
            format_metric(a.mean_ssim)
        );
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Invert(o) => cmd_invert(&o.config(false)?, false).map(|_| true),
        Command::Reconstruct(o) => cmd_invert(&o.config(false)?, true).map(|_| true),
        Command::Edit(o) => cmd_edit(&o.config(true)?).map(|_| true),
        Command::Sweep(o) => {
            let cfg = o.config(false)?;
            let report = run_sweep(&cfg)?;
            print_aggregates(&report);
            write_reports(&report, &out_dir(&cfg)?, "sweep")?;
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} cells failed; see the error column");
            }
            Ok(true)
        }
        Command::Ablate(o) => {
            let mut cfg = o.config(false)?;
            cfg.methods = vec![Method::FecKvReuse, Method::FecVReuse, Method::Direct];
            let report = run_ablation_v_only(&cfg)?;
            print_aggregates(&report);
            write_reports(&report, &out_dir(&cfg)?, "ablation")?;
            Ok(true)
        }
        Command::CheckBatch(o) => {
            let report = check_batch_invariance(&o.config(false)?)?;
            for c in &report.checks {
                let verdict = if c.bit_identical { "PASS" } else { "FAIL" };
                println!("{verdict} {} (max abs diff {:e})", c.name, c.max_abs_diff);
            }
            println!("reference divergence threshold: {:e}", report.reference_threshold);
            Ok(report.passed())
        }
        Command::Timing(o) => {
            let cfg = o.config(false)?;
            let report = report_timing(&cfg)?;
            println!("steps={} guidance={}", report.steps, format_metric(report.guidance));
            println!("path,millis,calls,reconstruction_calls,edit_calls");
            for r in &report.rows {
                println!(
                    "{},{:.3},{},{},{}",
                    r.path,
                    r.millis,
                    r.total_calls(),
                    r.calls_on(fec_core::denoiser::Route::Reconstruction),
                    r.calls_on(fec_core::denoiser::Route::Edit)
                );
            }
            for v in &report.violations {
                eprintln!("FAIL {v}");
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
