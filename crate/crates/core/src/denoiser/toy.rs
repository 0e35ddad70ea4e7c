//! Small untrained transformer used as `eps_theta`.
//!
//! The latent is cut into `patch x patch` patches, one token each. Tokens pass through
//! an input projection (plus sinusoidal position and time embeddings), `layer_count`
//! pre-norm blocks of self-attention, cross-attention over the prompt tokens and a GELU
//! MLP, and finally an output projection back to patches.
//!
//! Weights are drawn once from `init_seed` and never trained. The init gains control how
//! sharply attention concentrates and how strongly each path feeds the residual stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Denoiser, EvalHooks, KvHook, KvPair, PromptEmbedding};
use crate::error::{FecError, Result};
use crate::latent::{Latent, LatentShape};

const LN_EPS: f64 = 1e-5;

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// `sqrt(d_head)`, standard scaled dot-product attention.
    #[default]
    SqrtHeadDim,
    /// `d_head`, the literal form of the printed KV-reuse attention block.
    HeadDim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_shape: LatentShape,
    pub patch_size: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub mlp_hidden: usize,
    /// Width of the prompt token vectors.
    pub context_dim: usize,
    pub max_timestep: usize,
    pub init_seed: u64,
    pub attention_scale: AttentionScale,
    /// Init gain of the self-attention query/key projections.
    pub qk_gain: f64,
    pub self_out_gain: f64,
    pub cross_out_gain: f64,
    pub output_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_shape: LatentShape::default(),
            patch_size: 2,
            model_dim: 32,
            head_count: 4,
            layer_count: 4,
            mlp_hidden: 64,
            context_dim: super::DEFAULT_EMBED_DIM,
            max_timestep: crate::schedule::DEFAULT_TRAIN_STEPS,
            init_seed: 0,
            attention_scale: AttentionScale::SqrtHeadDim,
            qk_gain: 4.0,
            self_out_gain: 2.0,
            cross_out_gain: 3.0,
            output_gain: 0.6,
        }
    }
}

impl DenoiserConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { init_seed: seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let s = self.latent_shape;
        let bad = |m: &str| Err(FecError::ShapeMismatch { expected: m.to_string(), actual: format!("{self:?}") });
        if self.patch_size == 0 || !s.height.is_multiple_of(self.patch_size) || !s.width.is_multiple_of(self.patch_size) {
            return bad("latent height/width divisible by patch_size");
        }
        if self.head_count == 0 || !self.model_dim.is_multiple_of(self.head_count) || !self.model_dim.is_multiple_of(2) {
            return bad("even model_dim divisible by head_count");
        }
        if s.is_empty() || self.layer_count == 0 || self.mlp_hidden == 0 || self.context_dim == 0 {
            return bad("non-empty latent and layers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    cross_q: Vec<f64>,
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
    cross_o: Vec<f64>,
    mlp_in: Vec<f64>,
    mlp_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    grid: (usize, usize),
    input: Vec<f64>,
    time: Vec<f64>,
    position: Vec<f64>,
    blocks: Vec<Block>,
    output: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = |fan_in: usize, fan_out: usize, gain: f64| -> Vec<f64> {
            let std = gain / (fan_in as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n * std
                })
                .collect()
        };
        let p = config.patch_size;
        let s = config.latent_shape;
        let patch_dim = s.channels * p * p;
        let d = config.model_dim;
        let input = init(patch_dim, d, 1.0);
        let time = init(d, d, 1.0);
        let blocks = (0..config.layer_count)
            .map(|_| Block {
                q: init(d, d, config.qk_gain),
                k: init(d, d, config.qk_gain),
                v: init(d, d, 1.0),
                o: init(d, d, config.self_out_gain),
                cross_q: init(d, d, 1.0),
                cross_k: init(config.context_dim, d, 1.0),
                cross_v: init(config.context_dim, d, 1.0),
                cross_o: init(d, d, config.cross_out_gain),
                mlp_in: init(d, config.mlp_hidden, 1.0),
                mlp_out: init(config.mlp_hidden, d, 1.0),
            })
            .collect();
        let output = init(d, patch_dim, config.output_gain);

        let grid = (s.height / p, s.width / p);
        let tokens = grid.0 * grid.1;
        let mut position = Vec::with_capacity(tokens * d);
        for n in 0..tokens {
            position.extend(sinusoidal(n as f64, d).into_iter().map(|v| 0.5 * v));
        }
        Ok(Self { config, grid, input, time, position, blocks, output })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn patch_dim(&self) -> usize {
        self.config.latent_shape.channels * self.config.patch_size * self.config.patch_size
    }

    fn patchify(&self, z: &Latent) -> Vec<f64> {
        let p = self.config.patch_size;
        let (gh, gw) = self.grid;
        let channels = self.config.latent_shape.channels;
        let mut out = Vec::with_capacity(self.tokens() * self.patch_dim());
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.push(z.get(c, py * p + dy, px * p + dx));
                        }
                    }
                }
            }
        }
        out
    }

    fn unpatchify(&self, tokens: &[f64]) -> Latent {
        let p = self.config.patch_size;
        let (_, gw) = self.grid;
        let pd = self.patch_dim();
        Latent::from_fn(self.config.latent_shape, |c, y, x| {
            let n = (y / p) * gw + x / p;
            tokens[n * pd + c * p * p + (y % p) * p + x % p]
        })
    }

    fn logit_scale(&self) -> f64 {
        let dh = (self.config.model_dim / self.config.head_count) as f64;
        match self.config.attention_scale {
            AttentionScale::SqrtHeadDim => 1.0 / dh.sqrt(),
            AttentionScale::HeadDim => 1.0 / dh,
        }
    }

    fn check_hooks(&self, t: usize, cond: &PromptEmbedding, hooks: &EvalHooks<'_>) -> Result<()> {
        if cond.dim() != self.config.context_dim {
            return Err(FecError::ShapeMismatch {
                expected: format!("prompt width {}", self.config.context_dim),
                actual: cond.dim().to_string(),
            });
        }
        let geometry = (self.tokens(), self.config.model_dim);
        let layers = self.config.layer_count;
        let check_geometry = |g: (usize, usize), l: usize| {
            if g != geometry || l != layers {
                return Err(FecError::ShapeMismatch {
                    expected: format!("KV cache {}x{} over {layers} layers", geometry.0, geometry.1),
                    actual: format!("{}x{} over {l} layers", g.0, g.1),
                });
            }
            Ok(())
        };
        match &hooks.kv {
            KvHook::None => {}
            KvHook::Capture { cache, overwrite } => {
                check_geometry(cache.geometry(), cache.layer_count())?;
                if !overwrite {
                    if let Some(layer) = (0..layers).find(|&l| cache.has(t, l, hooks.branch)) {
                        return Err(FecError::DuplicateCapture { t, layer });
                    }
                }
            }
            KvHook::Inject { cache, layers: range, .. } => {
                range.validate(layers)?;
                if !range.is_empty() {
                    check_geometry(cache.geometry(), cache.layer_count())?;
                }
                for l in range.start..range.end {
                    cache.get(t, l, hooks.branch)?;
                }
            }
        }
        if let Some(trace) = &hooks.trace {
            if trace.grid() != self.grid || trace.n_tokens() != cond.n_tokens() {
                return Err(FecError::ShapeMismatch {
                    expected: format!("trace over {:?} with {} tokens", self.grid, cond.n_tokens()),
                    actual: format!("{:?} with {} tokens", trace.grid(), trace.n_tokens()),
                });
            }
        }
        Ok(())
    }
}

impl Denoiser for ToyDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape
    }

    fn layer_count(&self) -> usize {
        self.config.layer_count
    }

    fn kv_geometry(&self) -> (usize, usize) {
        (self.tokens(), self.config.model_dim)
    }

    fn attention_grid(&self) -> (usize, usize) {
        self.grid
    }

    fn max_timestep(&self) -> usize {
        self.config.max_timestep
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent> {
        self.check_inputs(z, t)?;
        self.check_hooks(t, cond, hooks)?;

        let n = self.tokens();
        let d = self.config.model_dim;
        let heads = self.config.head_count;
        let scale = self.logit_scale();
        let ctx_tokens = cond.n_tokens();

        let mut h = matmul(&self.patchify(z), n, self.patch_dim(), &self.input, d);
        let temb = matmul(&sinusoidal(t as f64, d), 1, d, &self.time, d);
        for (i, v) in h.iter_mut().enumerate() {
            *v += self.position[i] + temb[i % d];
        }

        for (l, block) in self.blocks.iter().enumerate() {
            let a = layer_norm(&h, d);
            let q = matmul(&a, n, d, &block.q, d);
            let mut k = matmul(&a, n, d, &block.k, d);
            let mut v = matmul(&a, n, d, &block.v, d);
            match &mut hooks.kv {
                KvHook::None => {}
                KvHook::Capture { cache, .. } => {
                    cache.insert(t, l, hooks.branch, KvPair { keys: k.clone(), values: v.clone() }, true)?;
                }
                KvHook::Inject { cache, layers, values_only } => {
                    if layers.contains(l) {
                        let cached = cache.get(t, l, hooks.branch)?;
                        if !*values_only {
                            k.clone_from(&cached.keys);
                        }
                        v.clone_from(&cached.values);
                    }
                }
            }
            let attn = attention(&q, &k, &v, n, n, heads, d, scale, None);
            add_assign(&mut h, &matmul(&attn, n, d, &block.o, d));

            let a = layer_norm(&h, d);
            let q = matmul(&a, n, d, &block.cross_q, d);
            let k = matmul(cond.tokens(), ctx_tokens, cond.dim(), &block.cross_k, d);
            let v = matmul(cond.tokens(), ctx_tokens, cond.dim(), &block.cross_v, d);
            let mut probs = hooks.trace.as_ref().map(|_| vec![0.0; n * ctx_tokens]);
            let attn = attention(&q, &k, &v, n, ctx_tokens, heads, d, scale, probs.as_mut());
            add_assign(&mut h, &matmul(&attn, n, d, &block.cross_o, d));
            if let (Some(trace), Some(p)) = (hooks.trace.as_deref_mut(), probs) {
                trace.record(t, l, p)?;
            }

            let a = layer_norm(&h, d);
            let mut hidden = matmul(&a, n, d, &block.mlp_in, self.config.mlp_hidden);
            hidden.iter_mut().for_each(|x| *x = gelu(*x));
            add_assign(&mut h, &matmul(&hidden, n, self.config.mlp_hidden, &block.mlp_out, d));
        }

        let out = matmul(&layer_norm(&h, d), n, d, &self.output, self.patch_dim());
        Ok(self.unpatchify(&out))
    }
}

fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> =
        (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * pos).collect();
    freqs.iter().map(|a| a.sin()).chain(freqs.iter().map(|a| a.cos())).collect()
}

/// `x (rows x inner) @ w (inner x cols)`, accumulating in a fixed order.
fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * cols);
    let mut out = vec![0.0; rows * cols];
    for (xr, or) in x.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        for (&xv, wr) in xr.iter().zip(w.chunks_exact(cols)) {
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn add_assign(h: &mut [f64], delta: &[f64]) {
    h.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
}

fn layer_norm(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(dim) {
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Multi-head attention; `probs`, when given, receives the head-averaged weights.
#[allow(clippy::too_many_arguments)]
fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    heads: usize,
    dim: usize,
    scale: f64,
    mut probs: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let dh = dim / heads;
    let mut out = vec![0.0; nq * dim];
    let mut weights = vec![0.0; nk];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..nq {
            let qi = &q[i * dim + off..i * dim + off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, w) in weights.iter_mut().enumerate() {
                let kj = &k[j * dim + off..j * dim + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                *w = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            let oi = &mut out[i * dim + off..i * dim + off + dh];
            for (j, w) in weights.iter_mut().enumerate() {
                *w /= sum;
                let vj = &v[j * dim + off..j * dim + off + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += *w * vv;
                }
            }
            if let Some(p) = probs.as_deref_mut() {
                for (j, &w) in weights.iter().enumerate() {
                    p[i * nk + j] += w / heads as f64;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{
        embed_prompt, predict_noise, AttentionTrace, predict_noise_batch, predict_noise_capture,
        predict_noise_inject, predict_noise_inject_v_only, Branch, KvCache, LayerRange,
    };

    fn small() -> ToyDenoiser {
        ToyDenoiser::new(DenoiserConfig {
            latent_shape: LatentShape::new(2, 4, 4),
            model_dim: 8,
            head_count: 2,
            layer_count: 2,
            mlp_hidden: 8,
            context_dim: 64,
            init_seed: 5,
            ..DenoiserConfig::default()
        })
        .unwrap()
    }

    fn latent(shape: LatentShape, k: f64) -> Latent {
        Latent::from_fn(shape, |c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.37 + k).sin())
    }

    #[test]
    fn identical_config_gives_identical_weights() {
        let a = ToyDenoiser::new(DenoiserConfig::with_seed(11)).unwrap();
        let b = ToyDenoiser::new(DenoiserConfig::with_seed(11)).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.output, b.output);
        let c = ToyDenoiser::new(DenoiserConfig::with_seed(12)).unwrap();
        assert_ne!(a.input, c.input);
    }

    #[test]
    fn deterministic_and_batch_invariant() {
        let net = small();
        let z = latent(net.latent_shape(), 0.1);
        let c = embed_prompt("a cat", 0);
        let a = predict_noise(&net, &z, 500, &c).unwrap();
        let b = predict_noise(&net, &z, 500, &c).unwrap();
        assert!(a.bit_eq(&b));
        let batch = predict_noise_batch(&net, &[z.clone(), z.clone()], 500, &c).unwrap();
        assert!(batch.iter().all(|row| row.bit_eq(&a)));
    }

    #[test]
    fn capture_is_observation_only_and_self_injection_is_identity() {
        let net = small();
        let shape = net.latent_shape();
        let z = latent(shape, 0.3);
        let c = embed_prompt("a cat", 0);
        let (tokens, dim) = net.kv_geometry();
        let mut cache = KvCache::new(net.layer_count(), tokens, dim);
        let mut trace = AttentionTrace::new(2, 2, c.n_tokens());
        let plain = predict_noise(&net, &z, 40, &c).unwrap();
        let captured =
            predict_noise_capture(&net, &z, 40, &c, Branch::Cond, &mut cache, false, Some(&mut trace)).unwrap();
        assert!(captured.bit_eq(&plain));
        assert_eq!(cache.len(), net.layer_count());
        assert_eq!(trace.len(), net.layer_count());
        let full = LayerRange::full(net.layer_count());
        let injected = predict_noise_inject(&net, &z, 40, &c, Branch::Cond, &cache, full).unwrap();
        assert!(injected.bit_eq(&plain));
        let v_only = predict_noise_inject_v_only(&net, &z, 40, &c, Branch::Cond, &cache, full).unwrap();
        assert!(v_only.bit_eq(&plain));
        let none = predict_noise_inject(&net, &z, 40, &c, Branch::Cond, &cache, LayerRange::empty()).unwrap();
        assert!(none.bit_eq(&plain));

        let again = predict_noise_capture(&net, &z, 40, &c, Branch::Cond, &mut cache, false, None);
        assert!(matches!(again, Err(FecError::DuplicateCapture { t: 40, layer: 0 })));
        predict_noise_capture(&net, &z, 40, &c, Branch::Cond, &mut cache, true, None).unwrap();
    }

    #[test]
    fn injection_changes_perturbed_prediction() {
        let net = small();
        let shape = net.latent_shape();
        let z = latent(shape, 0.3);
        let perturbed = z.zip_map(&latent(shape, 2.0), |a, b| a + 0.2 * b).unwrap();
        let c = embed_prompt("a cat", 0);
        let (tokens, dim) = net.kv_geometry();
        let mut cache = KvCache::new(net.layer_count(), tokens, dim);
        predict_noise_capture(&net, &z, 40, &c, Branch::Cond, &mut cache, false, None).unwrap();
        let full = LayerRange::full(net.layer_count());
        let plain = predict_noise(&net, &perturbed, 40, &c).unwrap();
        let inj = predict_noise_inject(&net, &perturbed, 40, &c, Branch::Cond, &cache, full).unwrap();
        let v_only = predict_noise_inject_v_only(&net, &perturbed, 40, &c, Branch::Cond, &cache, full).unwrap();
        assert!(plain.max_abs_diff(&inj).unwrap() > 1e-6);
        assert!(plain.max_abs_diff(&v_only).unwrap() > 1e-6);
        assert!(inj.max_abs_diff(&v_only).unwrap() > 0.0);
    }

    #[test]
    fn injection_errors() {
        let net = small();
        let z = latent(net.latent_shape(), 0.0);
        let c = embed_prompt("", 0);
        let (tokens, dim) = net.kv_geometry();
        let cache = KvCache::new(net.layer_count(), tokens, dim);
        let full = LayerRange::full(net.layer_count());
        assert!(matches!(
            predict_noise_inject(&net, &z, 40, &c, Branch::Cond, &cache, full),
            Err(FecError::MissingCacheEntry { t: 40, layer: 0 })
        ));
        assert!(matches!(
            predict_noise_inject(&net, &z, 40, &c, Branch::Cond, &cache, LayerRange::new(0, 3)),
            Err(FecError::LayerRange { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let net = small();
        let c = embed_prompt("", 0);
        let wrong = Latent::zeros(LatentShape::new(2, 4, 5));
        assert!(matches!(predict_noise(&net, &wrong, 3, &c), Err(FecError::ShapeMismatch { .. })));
        let z = Latent::zeros(net.latent_shape());
        assert!(matches!(predict_noise(&net, &z, 0, &c), Err(FecError::TimestepOutOfRange { .. })));
        assert!(matches!(predict_noise(&net, &z, 1001, &c), Err(FecError::TimestepOutOfRange { .. })));
        let narrow = crate::denoiser::PromptEmbedder { n_tokens: 4, dim: 16, seed: 0 }.embed("x");
        assert!(predict_noise(&net, &z, 3, &narrow).is_err());
        assert!(ToyDenoiser::new(DenoiserConfig { patch_size: 3, ..DenoiserConfig::default() }).is_err());
    }

    #[test]
    fn trace_rows_are_distributions() {
        let net = small();
        let z = latent(net.latent_shape(), 0.7);
        let c = embed_prompt("a red cat", 2);
        let (tokens, dim) = net.kv_geometry();
        let mut cache = KvCache::new(net.layer_count(), tokens, dim);
        let mut trace = AttentionTrace::new(2, 2, c.n_tokens());
        predict_noise_capture(&net, &z, 10, &c, Branch::Cond, &mut cache, false, Some(&mut trace)).unwrap();
        for l in 0..net.layer_count() {
            let m = trace.get(10, l).unwrap();
            for row in m.chunks(c.n_tokens()) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_dim_scale_differs() {
        let base = small();
        let alt = ToyDenoiser::new(DenoiserConfig {
            attention_scale: AttentionScale::HeadDim,
            ..base.config().clone()
        })
        .unwrap();
        let z = latent(base.latent_shape(), 0.4);
        let c = embed_prompt("a cat", 0);
        let a = predict_noise(&base, &z, 100, &c).unwrap();
        let b = predict_noise(&alt, &z, 100, &c).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }
}
