//! Experiment configuration and its plain-text file format.
//!
//! ```text
//! # comment (also `;`)
//! [section]
//! key = value
//! ```
//!
//! Keys are addressed as `section.key`; keys before any section header belong to the
//! `experiment` section. Lists are comma separated, seed lists also accept `a..b`
//! (half-open). Every key can be overridden from the command line with
//! `--set section.key=value`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::denoiser::{AttentionScale, DenoiserConfig, LayerRange};
use crate::error::{FecError, Result};
use crate::io::FloatWidth;
use crate::latent::LatentShape;
use crate::sampling::KvCapture;
use crate::schedule::{ScheduleKind, DEFAULT_INFERENCE_STEPS, DEFAULT_TRAIN_STEPS};

/// Reconstruction methods a sweep can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Direct,
    NegPrompt,
    FecRef,
    FecNoise,
    FecKvReuse,
    FecVReuse,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Direct, Method::NegPrompt, Method::FecRef, Method::FecNoise, Method::FecKvReuse, Method::FecVReuse];

    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::NegPrompt => "neg-prompt",
            Method::FecRef => "fec-ref",
            Method::FecNoise => "fec-noise",
            Method::FecKvReuse => "fec-kv-reuse",
            Method::FecVReuse => "fec-v-reuse",
        }
    }

    pub fn needs_kv(self) -> bool {
        matches!(self, Method::FecKvReuse | Method::FecVReuse)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FecError::InvalidRequest(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptType {
    Empty,
    NonEmpty,
}

impl PromptType {
    pub fn name(self) -> &'static str {
        match self {
            PromptType::Empty => "empty",
            PromptType::NonEmpty => "non-empty",
        }
    }
}

impl FromStr for PromptType {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empty" => Ok(PromptType::Empty),
            "non-empty" => Ok(PromptType::NonEmpty),
            other => Err(FecError::InvalidRequest(format!("unknown prompt type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    Gaussian,
    Blocks,
    Gradient,
}

impl LatentKind {
    pub fn name(self) -> &'static str {
        match self {
            LatentKind::Gaussian => "gaussian",
            LatentKind::Blocks => "blocks",
            LatentKind::Gradient => "gradient",
        }
    }
}

impl FromStr for LatentKind {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(LatentKind::Gaussian),
            "blocks" => Ok(LatentKind::Blocks),
            "gradient" => Ok(LatentKind::Gradient),
            other => Err(FecError::UnknownLatentKind(other.to_string())),
        }
    }
}

/// Where an edit mask comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    /// A `FECMASK1` file.
    File(PathBuf),
    /// `box:y0,y1,x0,x1`, half-open in latent coordinates.
    Box { y0: usize, y1: usize, x0: usize, x1: usize },
}

impl FromStr for MaskSpec {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("box:") {
            Some(rest) => {
                let v = parse_list::<usize>(rest)?;
                match v[..] {
                    [y0, y1, x0, x1] => Ok(MaskSpec::Box { y0, y1, x0, x1 }),
                    _ => Err(FecError::InvalidMask(format!("box needs y0,y1,x0,x1, got `{rest}`"))),
                }
            }
            None => Ok(MaskSpec::File(PathBuf::from(s))),
        }
    }
}

/// Parses `start..end` or `start,end`.
pub fn parse_layer_range(s: &str) -> Result<LayerRange> {
    let parts: Vec<&str> = if s.contains("..") { s.split("..").collect() } else { s.split(',').collect() };
    match parts[..] {
        [a, b] => Ok(LayerRange::new(parse_one(a.trim())?, parse_one(b.trim())?)),
        _ => Err(FecError::InvalidRequest(format!("layer range `{s}` is not start..end"))),
    }
}

/// Numeric precision of stored results: 64-bit, or rounded through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn width(self) -> FloatWidth {
        match self {
            Precision::F32 => FloatWidth::F32,
            Precision::F64 => FloatWidth::F64,
        }
    }
}

impl FromStr for Precision {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(FecError::InvalidRequest(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub steps: usize,
    pub train_steps: usize,
    pub schedule: ScheduleKind,
    pub sampling_guidance: Vec<f64>,
    /// Inversion scales to sweep; `None` inverts with the sampling scale of each cell.
    pub inversion_guidance: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub denoiser: DenoiserConfig,
    /// Use `denoiser.init_seed + seed` as the network seed of each cell.
    pub vary_denoiser: bool,
    pub embed_seed: u64,
    pub data_kind: LatentKind,
    /// Data seed of a cell is `seed + data_seed_offset`.
    pub data_seed_offset: u64,
    pub prompt: String,
    pub edit_prompt: Option<String>,
    pub prompt_types: Vec<PromptType>,
    pub edit_method: Option<String>,
    pub blend_word: Option<String>,
    pub mask: Option<MaskSpec>,
    pub layers: Option<LayerRange>,
    pub kv_capture: KvCapture,
    pub precision: Precision,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Direct, Method::FecRef, Method::FecNoise, Method::FecKvReuse],
            steps: DEFAULT_INFERENCE_STEPS,
            train_steps: DEFAULT_TRAIN_STEPS,
            schedule: ScheduleKind::default(),
            sampling_guidance: vec![1.0, 5.0, 7.5],
            inversion_guidance: None,
            seeds: (0..10).collect(),
            denoiser: DenoiserConfig::default(),
            vary_denoiser: true,
            embed_seed: 0,
            data_kind: LatentKind::Gaussian,
            data_seed_offset: 1000,
            prompt: "a photo of a cat".into(),
            edit_prompt: None,
            prompt_types: vec![PromptType::NonEmpty],
            edit_method: None,
            blend_word: None,
            mask: None,
            layers: None,
            kv_capture: KvCapture::TwoPass,
            precision: Precision::F64,
            out_dir: None,
        }
    }
}

/// Every recognised `section.key`.
pub const CONFIG_KEYS: &[&str] = &[
    "experiment.methods",
    "experiment.steps",
    "experiment.seeds",
    "experiment.sampling_guidance",
    "experiment.inversion_guidance",
    "experiment.precision",
    "schedule.kind",
    "schedule.beta_start",
    "schedule.beta_end",
    "schedule.train_steps",
    "model.init_seed",
    "model.vary_per_seed",
    "model.channels",
    "model.height",
    "model.width",
    "model.patch",
    "model.dim",
    "model.heads",
    "model.layers",
    "model.mlp_hidden",
    "model.attention_scale",
    "model.qk_gain",
    "model.self_out_gain",
    "model.cross_out_gain",
    "model.output_gain",
    "data.kind",
    "data.seed_offset",
    "prompts.source",
    "prompts.edit",
    "prompts.types",
    "prompts.embed_seed",
    "edit.method",
    "edit.blend_word",
    "edit.mask",
    "edit.layers",
    "capture.kv",
    "output.dir",
];

fn parse_one<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| FecError::InvalidRequest(format!("cannot parse `{s}`")))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_one).collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => out.extend(parse_one::<u64>(a)?..parse_one::<u64>(b)?),
            None => out.push(parse_one(part)?),
        }
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(FecError::InvalidRequest(format!("expected a boolean, got `{other}`"))),
    }
}

fn optional(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

impl ExperimentConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "experiment.methods" => self.methods = parse_list(v)?,
            "experiment.steps" => self.steps = parse_one(v)?,
            "experiment.seeds" => self.seeds = parse_seeds(v)?,
            "experiment.sampling_guidance" => self.sampling_guidance = parse_list(v)?,
            "experiment.inversion_guidance" => {
                self.inversion_guidance = if v == "same" || v.is_empty() { None } else { Some(parse_list(v)?) }
            }
            "experiment.precision" => self.precision = parse_one(v)?,
            "schedule.kind" => {
                let (start, end) = match self.schedule {
                    ScheduleKind::LinearBeta { beta_start, beta_end }
                    | ScheduleKind::ScaledLinearBeta { beta_start, beta_end } => (beta_start, beta_end),
                    ScheduleKind::ConstantBeta { beta } => (beta, beta),
                };
                self.schedule = ScheduleKind::from_parts(v, start, end)?;
            }
            "schedule.beta_start" | "schedule.beta_end" => {
                let b: f64 = parse_one(v)?;
                self.schedule = match (self.schedule, key == "schedule.beta_start") {
                    (ScheduleKind::LinearBeta { beta_end, .. }, true) => ScheduleKind::LinearBeta { beta_start: b, beta_end },
                    (ScheduleKind::LinearBeta { beta_start, .. }, false) => ScheduleKind::LinearBeta { beta_start, beta_end: b },
                    (ScheduleKind::ScaledLinearBeta { beta_end, .. }, true) => {
                        ScheduleKind::ScaledLinearBeta { beta_start: b, beta_end }
                    }
                    (ScheduleKind::ScaledLinearBeta { beta_start, .. }, false) => {
                        ScheduleKind::ScaledLinearBeta { beta_start, beta_end: b }
                    }
                    (ScheduleKind::ConstantBeta { .. }, _) => ScheduleKind::ConstantBeta { beta: b },
                };
            }
            "schedule.train_steps" => {
                self.train_steps = parse_one(v)?;
                self.denoiser.max_timestep = self.train_steps;
            }
            "model.init_seed" => self.denoiser.init_seed = parse_one(v)?,
            "model.vary_per_seed" => self.vary_denoiser = parse_bool(v)?,
            "model.channels" => self.denoiser.latent_shape.channels = parse_one(v)?,
            "model.height" => self.denoiser.latent_shape.height = parse_one(v)?,
            "model.width" => self.denoiser.latent_shape.width = parse_one(v)?,
            "model.patch" => self.denoiser.patch_size = parse_one(v)?,
            "model.dim" => self.denoiser.model_dim = parse_one(v)?,
            "model.heads" => self.denoiser.head_count = parse_one(v)?,
            "model.layers" => self.denoiser.layer_count = parse_one(v)?,
            "model.mlp_hidden" => self.denoiser.mlp_hidden = parse_one(v)?,
            "model.attention_scale" => {
                self.denoiser.attention_scale = match v {
                    "sqrt-head" => AttentionScale::SqrtHeadDim,
                    "head" => AttentionScale::HeadDim,
                    other => {
                        return Err(FecError::InvalidRequest(format!(
                            "attention_scale must be sqrt-head or head, got `{other}`"
                        )))
                    }
                }
            }
            "model.qk_gain" => self.denoiser.qk_gain = parse_one(v)?,
            "model.self_out_gain" => self.denoiser.self_out_gain = parse_one(v)?,
            "model.cross_out_gain" => self.denoiser.cross_out_gain = parse_one(v)?,
            "model.output_gain" => self.denoiser.output_gain = parse_one(v)?,
            "data.kind" => self.data_kind = parse_one::<String>(v)?.parse()?,
            "data.seed_offset" => self.data_seed_offset = parse_one(v)?,
            "prompts.source" => self.prompt = v.to_string(),
            "prompts.edit" => self.edit_prompt = optional(v),
            "prompts.types" => self.prompt_types = parse_list(v)?,
            "prompts.embed_seed" => self.embed_seed = parse_one(v)?,
            "edit.method" => self.edit_method = optional(v),
            "edit.blend_word" => self.blend_word = optional(v),
            "edit.mask" => self.mask = optional(v).map(|s| s.parse()).transpose()?,
            "edit.layers" => self.layers = optional(v).map(|s| parse_layer_range(&s)).transpose()?,
            "capture.kv" => {
                self.kv_capture = match v {
                    "two-pass" => KvCapture::TwoPass,
                    "inline" => KvCapture::Inline,
                    other => {
                        return Err(FecError::InvalidRequest(format!("capture.kv must be two-pass or inline, got `{other}`")))
                    }
                }
            }
            "output.dir" => self.out_dir = optional(v).map(PathBuf::from),
            other => return Err(FecError::InvalidRequest(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, (value, line)) in parse_entries(text)? {
            cfg.set(&key, &value).map_err(|e| FecError::Config { line, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FecError::InvalidRequest(m.to_string()));
        if self.seeds.is_empty() {
            return fail("seed list is empty");
        }
        if self.methods.is_empty() {
            return fail("method list is empty");
        }
        if self.sampling_guidance.is_empty() || self.inversion_guidance.as_ref().is_some_and(Vec::is_empty) {
            return fail("guidance list is empty");
        }
        if self.prompt_types.is_empty() {
            return fail("prompt type list is empty");
        }
        if self.steps == 0 || self.steps > self.train_steps {
            return fail("steps must lie in [1, train_steps]");
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.denoiser.latent_shape
    }

    /// Network config for a cell with the given seed.
    pub fn denoiser_for(&self, seed: u64) -> DenoiserConfig {
        let init_seed =
            if self.vary_denoiser { self.denoiser.init_seed.wrapping_add(seed) } else { self.denoiser.init_seed };
        DenoiserConfig { init_seed, max_timestep: self.train_steps, ..self.denoiser.clone() }
    }
}

/// Splits a config body into `section.key -> (value, line)`; later entries win.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut section = "experiment".to_string();
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty() && !n.contains(char::is_whitespace))
                .ok_or_else(|| FecError::Config { line: line_no, message: format!("bad section header `{line}`") })?;
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| FecError::Config { line: line_no, message: format!("expected key = value, got `{line}`") })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(FecError::Config { line: line_no, message: format!("bad key `{key}`") });
        }
        let value = value.trim();
        let value = value.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(value);
        out.insert(format!("{section}.{key}"), (value.to_string(), line_no));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_lists() {
        let cfg = ExperimentConfig::parse(
            "steps = 20\n\
             # comment\n\
             [experiment]\n\
             methods = direct, fec-noise\n\
             seeds = 0..3, 7\n\
             sampling_guidance = 7.5\n\
             inversion_guidance = 1, 3\n\
             [prompts]\n\
             source = \"a red cat\"\n\
             types = empty, non-empty\n\
             [edit]\n\
             mask = box:2,6,4,8\n\
             layers = 1..3\n\
             [model]\n\
             attention_scale = head\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.methods, vec![Method::Direct, Method::FecNoise]);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 7]);
        assert_eq!(cfg.inversion_guidance, Some(vec![1.0, 3.0]));
        assert_eq!(cfg.prompt, "a red cat");
        assert_eq!(cfg.prompt_types, vec![PromptType::Empty, PromptType::NonEmpty]);
        assert_eq!(cfg.mask, Some(MaskSpec::Box { y0: 2, y1: 6, x0: 4, x1: 8 }));
        assert_eq!(cfg.layers, Some(LayerRange::new(1, 3)));
        assert_eq!(cfg.denoiser.attention_scale, AttentionScale::HeadDim);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("[model]\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, FecError::Config { line: 3, .. }));
        assert!(matches!(ExperimentConfig::parse("[broken\n"), Err(FecError::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(FecError::Config { line: 1, .. })));
        assert!(ExperimentConfig::parse("seeds = \n").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("experiment.methods", "fec-ref"),
            ("experiment.steps", "10"),
            ("experiment.seeds", "1"),
            ("experiment.sampling_guidance", "2"),
            ("experiment.inversion_guidance", "same"),
            ("experiment.precision", "32"),
            ("schedule.kind", "linear-beta"),
            ("schedule.beta_start", "0.001"),
            ("schedule.beta_end", "0.02"),
            ("schedule.train_steps", "500"),
            ("model.init_seed", "3"),
            ("model.vary_per_seed", "false"),
            ("model.channels", "2"),
            ("model.height", "12"),
            ("model.width", "12"),
            ("model.patch", "2"),
            ("model.dim", "16"),
            ("model.heads", "2"),
            ("model.layers", "2"),
            ("model.mlp_hidden", "32"),
            ("model.attention_scale", "sqrt-head"),
            ("model.qk_gain", "1"),
            ("model.self_out_gain", "1"),
            ("model.cross_out_gain", "1"),
            ("model.output_gain", "1"),
            ("data.kind", "blocks"),
            ("data.seed_offset", "5"),
            ("prompts.source", "a cat"),
            ("prompts.edit", "a dog"),
            ("prompts.types", "empty"),
            ("prompts.embed_seed", "9"),
            ("edit.method", "fec-noise"),
            ("edit.blend_word", "dog"),
            ("edit.mask", "m.bin"),
            ("edit.layers", "0,2"),
            ("capture.kv", "inline"),
            ("output.dir", "out"),
        ];
        assert_eq!(samples.len(), CONFIG_KEYS.len());
        let mut cfg = ExperimentConfig::default();
        for (k, v) in samples {
            assert!(CONFIG_KEYS.contains(&k));
            cfg.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(cfg.schedule, ScheduleKind::LinearBeta { beta_start: 0.001, beta_end: 0.02 });
        assert_eq!(cfg.denoiser.max_timestep, 500);
        assert_eq!(cfg.kv_capture, KvCapture::Inline);
        assert_eq!(cfg.mask, Some(MaskSpec::File("m.bin".into())));
    }
}
