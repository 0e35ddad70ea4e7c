//! Prompt-swap editing on top of the samplers: blend-word masks, edit requests and
//! locality reporting.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::{AttentionTrace, Denoiser, LayerRange, PromptEmbedder, PromptEmbedding};
use crate::error::{FecError, Result};
use crate::io::FloatWidth;
use crate::latent::{Latent, LatentShape};
use crate::metrics::{latent_loss, trajectory_loss_curve};
use crate::sampling::{
    invert, read_series, sample_fec_kv_reuse, sample_fec_noise, sample_fec_ref_paired, write_series,
    CaptureOptions, GuidanceContext, KvCapture, KvReuseOptions, MaskProvider, SampleMode, Series,
};
use crate::schedule::{NoiseSchedule, TimestepPlan};

pub const MASK_MAGIC: &[u8] = b"FECMASK1";
pub const MASK_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskProvenance {
    AttentionDerived,
    UserSupplied,
}

/// Spatial mask over the latent grid; 1 marks the region being edited.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    provenance: MaskProvenance,
}

impl EditMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>, provenance: MaskProvenance) -> Result<Self> {
        if values.len() != height * width {
            return Err(FecError::InvalidMask(format!("{} values for a {height}x{width} grid", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FecError::InvalidMask(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values, provenance })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width], provenance: MaskProvenance::UserSupplied }
    }

    /// 1 inside rows `y0..y1` and columns `x0..x1`, 0 elsewhere.
    pub fn rect(height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Self> {
        if y0 > y1 || x0 > x1 || y1 > height || x1 > width {
            return Err(FecError::InvalidMask(format!("box [{y0}, {y1}) x [{x0}, {x1}) outside {height}x{width}")));
        }
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| f64::from(u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x)))))
            .collect();
        Self::new(height, width, values, MaskProvenance::UserSupplied)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Mean squared difference of `a` and `b` over positions where the mask is 0 (`outside`)
    /// or nonzero (`!outside`), across all channels. `None` if the region is empty.
    pub fn region_loss(&self, a: &Latent, b: &Latent, outside: bool) -> Result<Option<f64>> {
        a.ensure_same_shape(b)?;
        self.check_shape(a.shape())?;
        let spatial = self.values.len();
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if (self.values[i % spatial] == 0.0) == outside {
                sum += (x - y) * (x - y);
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    }

    fn check_shape(&self, shape: LatentShape) -> Result<()> {
        if (shape.height, shape.width) != (self.height, self.width) {
            return Err(FecError::InvalidMask(format!(
                "mask is {}x{}, latent grid is {}x{}",
                self.height, self.width, shape.height, shape.width
            )));
        }
        Ok(())
    }

    /// Stored in the trajectory layout with no timesteps and one `1 x height x width` tensor.
    pub fn write_to(&self, w: &mut impl Write, width: FloatWidth) -> Result<()> {
        let shape = LatentShape::new(1, self.height, self.width);
        let series = Series {
            timesteps: Vec::new(),
            shape,
            guidance: 0.0,
            seed: 0,
            latents: vec![Latent::new(shape, self.values.clone())?],
        };
        write_series(w, MASK_MAGIC, &series, width)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let series = read_series(r, MASK_MAGIC)?;
        if series.shape.channels != 1 || !series.timesteps.is_empty() {
            return Err(FecError::Format("a mask file holds one single-channel grid".into()));
        }
        let s = series.shape;
        let values = series.latents.into_iter().next().expect("one tensor").into_data();
        Self::new(s.height, s.width, values, MaskProvenance::UserSupplied)
    }

    pub fn save(&self, path: &Path, width: FloatWidth) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w, width)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl MaskProvider for EditMask {
    fn mask(&mut self, _t: usize, _trace: Option<&AttentionTrace>, shape: LatentShape) -> Result<Vec<f64>> {
        self.check_shape(shape)?;
        Ok(self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedMask {
    pub mask: EditMask,
    /// Set when the attention map was constant and the mask fell back to all zeros.
    pub degenerate: bool,
}

/// Binary mask from the cross-attention paid to `blend_word` at step `t`.
///
/// The layer-averaged map is upsampled to `height x width` by nearest neighbour,
/// min-max normalized and thresholded: positions above [`MASK_THRESHOLD`] become 1.
pub fn derive_mask(
    trace: &AttentionTrace,
    blend_word: &str,
    embedding: &PromptEmbedding,
    t: usize,
    height: usize,
    width: usize,
) -> Result<DerivedMask> {
    let token = embedding.token_index(blend_word).ok_or_else(|| FecError::BlendWordMissing(blend_word.into()))?;
    let map = trace
        .token_map(t, token)
        .ok_or_else(|| FecError::InvalidMask(format!("no cross-attention recorded at t = {t}")))?;
    let (gh, gw) = trace.grid();
    let up: Vec<f64> =
        (0..height).flat_map(|y| (0..width).map(move |x| (y * gh / height, x * gw / width))).map(|(sy, sx)| map[sy * gw + sx]).collect();
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        let mask = EditMask { provenance: MaskProvenance::AttentionDerived, ..EditMask::zeros(height, width) };
        return Ok(DerivedMask { mask, degenerate: true });
    }
    let values = up.iter().map(|v| if (v - lo) / range > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Ok(DerivedMask { mask: EditMask::new(height, width, values, MaskProvenance::AttentionDerived)?, degenerate: false })
}

/// Derives each step's mask from that step's conditional cross-attention.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    blend_word: String,
    embedding: PromptEmbedding,
    /// Timesteps whose attention map was degenerate.
    pub degenerate_steps: Vec<usize>,
    /// Mask used at the most recent step.
    pub last: Option<EditMask>,
}

impl AttentionMask {
    pub fn new(blend_word: &str, embedding: PromptEmbedding) -> Result<Self> {
        if embedding.token_index(blend_word).is_none() {
            return Err(FecError::BlendWordMissing(blend_word.into()));
        }
        Ok(Self { blend_word: blend_word.into(), embedding, degenerate_steps: Vec::new(), last: None })
    }
}

impl MaskProvider for AttentionMask {
    fn wants_trace(&self) -> bool {
        true
    }

    fn mask(&mut self, t: usize, trace: Option<&AttentionTrace>, shape: LatentShape) -> Result<Vec<f64>> {
        let trace = trace.ok_or_else(|| FecError::InvalidMask("attention mask needs a trace".into()))?;
        let derived = derive_mask(trace, &self.blend_word, &self.embedding, t, shape.height, shape.width)?;
        if derived.degenerate {
            log::warn!("constant attention map for `{}` at t = {t}; using an all-zero mask", self.blend_word);
            self.degenerate_steps.push(t);
        }
        let values = derived.mask.values.clone();
        self.last = Some(derived.mask);
        Ok(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditMethod {
    FecRef,
    FecNoise,
    FecKvReuse,
    /// V-only injection; exercised for the ablation, with no quality claim.
    FecVReuse,
}

impl EditMethod {
    pub fn name(self) -> &'static str {
        match self {
            EditMethod::FecRef => "fec-ref",
            EditMethod::FecNoise => "fec-noise",
            EditMethod::FecKvReuse => "fec-kv-reuse",
            EditMethod::FecVReuse => "fec-v-reuse",
        }
    }
}

impl fmt::Display for EditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditMethod {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fec-ref" => Ok(EditMethod::FecRef),
            "fec-noise" => Ok(EditMethod::FecNoise),
            "fec-kv-reuse" => Ok(EditMethod::FecKvReuse),
            "fec-v-reuse" => Ok(EditMethod::FecVReuse),
            other => Err(FecError::InvalidRequest(format!("unknown edit method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source_prompt: String,
    pub edit_prompt: String,
    pub blend_word: Option<String>,
    pub method: EditMethod,
    /// Injected layers for the KV methods; `None` means all layers.
    pub layers: Option<LayerRange>,
    pub guidance: f64,
    pub inversion_guidance: f64,
    /// Fixed mask for FEC-noise; takes precedence over the blend word.
    pub mask: Option<EditMask>,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if let Some(word) = &self.blend_word {
            if !self.edit_prompt.split_whitespace().any(|w| w == word) {
                return Err(FecError::BlendWordMissing(word.clone()));
            }
        }
        if self.method == EditMethod::FecNoise && self.mask.is_none() && self.blend_word.is_none() {
            return Err(FecError::InvalidRequest("fec-noise editing needs a mask or a blend word".into()));
        }
        if !self.guidance.is_finite() || !self.inversion_guidance.is_finite() {
            return Err(FecError::InvalidRequest("guidance scales must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub method: EditMethod,
    /// Latent loss against the inversion trajectory at each visited timestep.
    pub per_step_losses: Vec<(usize, f64)>,
    /// Latent loss of the output against the source latent.
    pub source_loss: f64,
    /// Loss against the source outside / inside the mask, when one was used.
    pub outside_mask_loss: Option<f64>,
    pub inside_mask_loss: Option<f64>,
    pub degenerate_mask_steps: Vec<usize>,
    /// The method's edit path is exercised without any claim about edit quality.
    pub mechanism_only: bool,
}

/// Inverts `z0` under the source prompt, then runs the method's edit path with the edit
/// prompt. The unconditional embedding is always the null prompt.
pub fn run_edit(
    net: &dyn Denoiser,
    req: &EditRequest,
    z0: &Latent,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
    embedder: &PromptEmbedder,
) -> Result<(Latent, EditReport)> {
    req.validate()?;
    let null = embedder.null();
    let source = embedder.embed(&req.source_prompt);
    let edit = embedder.embed(&req.edit_prompt);
    let inv_ctx = GuidanceContext::new(req.inversion_guidance, source.clone(), null.clone())?;
    let src_ctx = GuidanceContext::new(req.guidance, source, null.clone())?;
    let edit_ctx = GuidanceContext::new(req.guidance, edit.clone(), null)?;

    let kv_method = matches!(req.method, EditMethod::FecKvReuse | EditMethod::FecVReuse);
    let capture = CaptureOptions { kv: if kv_method { KvCapture::TwoPass } else { KvCapture::Off }, trace: false };
    let inv = invert(net, z0, &inv_ctx, plan, sched, capture, 0)?;
    let traj = &inv.trajectory;

    let mut used_mask = None;
    let mut degenerate = Vec::new();
    let output = match req.method {
        EditMethod::FecRef => sample_fec_ref_paired(net, traj, &src_ctx, &edit_ctx, plan, sched)?,
        EditMethod::FecNoise => match (&req.mask, &req.blend_word) {
            (Some(mask), _) => {
                let mut provider = mask.clone();
                let out = sample_fec_noise(net, traj, &src_ctx, plan, sched, &mut provider, SampleMode::Edit(&edit_ctx))?;
                used_mask = Some(mask.clone());
                out
            }
            (None, Some(word)) => {
                let mut provider = AttentionMask::new(word, edit)?;
                let out = sample_fec_noise(net, traj, &src_ctx, plan, sched, &mut provider, SampleMode::Edit(&edit_ctx))?;
                used_mask = provider.last.take();
                degenerate = provider.degenerate_steps;
                out
            }
            (None, None) => unreachable!("validated above"),
        },
        EditMethod::FecKvReuse | EditMethod::FecVReuse => {
            let cache = inv.kv.as_ref().expect("KV captured for KV methods");
            let layers = req.layers.unwrap_or(LayerRange::full(net.layer_count()));
            let opts = KvReuseOptions { layers, values_only: req.method == EditMethod::FecVReuse };
            sample_fec_kv_reuse(net, traj.end()?, cache, &src_ctx, plan, sched, opts, SampleMode::Edit(&edit_ctx))?
        }
    };

    let per_step_losses = trajectory_loss_curve(&output, traj)?;
    let out = output.into_final();
    let (outside_mask_loss, inside_mask_loss) = match &used_mask {
        Some(m) => (m.region_loss(&out, z0, true)?, m.region_loss(&out, z0, false)?),
        None => (None, None),
    };
    let report = EditReport {
        method: req.method,
        per_step_losses,
        source_loss: latent_loss(&out, z0)?,
        outside_mask_loss,
        inside_mask_loss,
        degenerate_mask_steps: degenerate,
        mechanism_only: req.method == EditMethod::FecVReuse,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hot_block_becomes_mask() {
        let mut tr = AttentionTrace::new(4, 4, 2);
        let mut probs = vec![0.0; 16 * 2];
        for q in 0..16 {
            let (y, x) = (q / 4, q % 4);
            let hot = (1..3).contains(&y) && (2..4).contains(&x);
            probs[q * 2] = if hot { 0.9 } else { 0.1 };
            probs[q * 2 + 1] = 1.0 - probs[q * 2];
        }
        tr.record(50, 0, probs).unwrap();
        let emb = crate::denoiser::embed_prompt("cat", 0);
        let d = derive_mask(&tr, "cat", &emb, 50, 8, 8).unwrap();
        assert!(!d.degenerate);
        assert_eq!(d.mask, EditMask { provenance: MaskProvenance::AttentionDerived, ..EditMask::rect(8, 8, 2, 6, 4, 8).unwrap() });
        assert!(d.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn uniform_map_is_degenerate() {
        let mut tr = AttentionTrace::new(2, 2, 4);
        tr.record(9, 0, vec![0.25; 16]).unwrap();
        let emb = crate::denoiser::embed_prompt("a red cat", 0);
        let d = derive_mask(&tr, "red", &emb, 9, 4, 4).unwrap();
        assert!(d.degenerate);
        assert!(d.mask.is_zero());
        assert!(matches!(derive_mask(&tr, "dog", &emb, 9, 4, 4), Err(FecError::BlendWordMissing(_))));
    }

    #[test]
    fn mask_file_roundtrip() {
        let m = EditMask::rect(4, 6, 1, 3, 0, 2).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf, FloatWidth::F32).unwrap();
        assert_eq!(&buf[..8], b"FECMASK1");
        assert_eq!(EditMask::read_from(&mut buf.as_slice()).unwrap(), m);
        assert!(EditMask::new(1, 2, vec![0.5, 1.5], MaskProvenance::UserSupplied).is_err());
        assert!(EditMask::rect(4, 4, 0, 5, 0, 1).is_err());
    }

    #[test]
    fn region_losses() {
        let m = EditMask::rect(1, 2, 0, 1, 0, 1).unwrap();
        let s = LatentShape::new(2, 1, 2);
        let a = Latent::new(s, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let b = Latent::zeros(s);
        assert_eq!(m.region_loss(&a, &b, false).unwrap(), Some(5.0));
        assert_eq!(m.region_loss(&a, &b, true).unwrap(), Some(0.0));
    }

    #[test]
    fn request_validation() {
        let req = EditRequest {
            source_prompt: "a cat".into(),
            edit_prompt: "a dog".into(),
            blend_word: Some("cat".into()),
            method: EditMethod::FecNoise,
            layers: None,
            guidance: 7.5,
            inversion_guidance: 7.5,
            mask: None,
        };
        assert!(matches!(req.validate(), Err(FecError::BlendWordMissing(_))));
        let req = EditRequest { blend_word: None, ..req };
        assert!(matches!(req.validate(), Err(FecError::InvalidRequest(_))));
        assert_eq!("fec-kv-reuse".parse::<EditMethod>().unwrap(), EditMethod::FecKvReuse);
        assert!("p2p".parse::<EditMethod>().is_err());
    }
}
