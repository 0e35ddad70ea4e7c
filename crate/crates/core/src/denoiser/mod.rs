//! Noise-prediction networks and their attention hooks.
//!
//! Every network implements [`Denoiser::forward`], which takes an [`EvalHooks`] describing
//! what the call may observe or override: self-attention K/V capture into a [`KvCache`],
//! K/V (or V-only) injection from one, and cross-attention recording into an
//! [`AttentionTrace`]. The convenience functions below cover the common combinations.

mod analytic;
mod embed;
mod kv;
mod toy;
mod trace;

use std::sync::atomic::{AtomicU64, Ordering};

pub use analytic::{ConstantDenoiser, GaussianDenoiser};
pub use embed::{embed_prompt, PromptEmbedder, PromptEmbedding, DEFAULT_EMBED_DIM, DEFAULT_TOKENS};
pub use kv::{KvCache, KvPair, KvSlot};
pub use toy::{AttentionScale, DenoiserConfig, ToyDenoiser};
pub use trace::AttentionTrace;

use crate::error::{FecError, Result};
use crate::latent::{Latent, LatentShape};

/// Which half of a classifier-free guidance pair an evaluation belongs to. KV captured on
/// one branch is injected into evaluations of the same branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Cond,
    Uncond,
}

/// Label charged for a network evaluation by [`Counted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    /// Evaluations that drive the inversion update.
    Inversion,
    /// Extra aligned evaluations made only to record K/V.
    Capture,
    /// Reconstruction-mode sampling.
    Sampling,
    /// The reconstruction half of a two-route editor.
    Reconstruction,
    /// The editing route.
    Edit,
}

impl Route {
    pub const ALL: [Route; 5] =
        [Route::Inversion, Route::Capture, Route::Sampling, Route::Reconstruction, Route::Edit];

    pub fn name(self) -> &'static str {
        match self {
            Route::Inversion => "inversion",
            Route::Capture => "capture",
            Route::Sampling => "sampling",
            Route::Reconstruction => "reconstruction",
            Route::Edit => "edit",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Half-open range `[start, end)` of transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn full(layers: usize) -> Self {
        Self { start: 0, end: layers }
    }

    pub fn empty() -> Self {
        Self { start: 0, end: 0 }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..self.end).contains(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.start > self.end || self.end > layers {
            return Err(FecError::LayerRange { start: self.start, end: self.end, layers });
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub enum KvHook<'a> {
    #[default]
    None,
    Capture {
        cache: &'a mut KvCache,
        overwrite: bool,
    },
    Inject {
        cache: &'a KvCache,
        layers: LayerRange,
        values_only: bool,
    },
}

/// Side channels of a single network evaluation.
#[derive(Debug)]
pub struct EvalHooks<'a> {
    pub route: Route,
    pub branch: Branch,
    pub kv: KvHook<'a>,
    pub trace: Option<&'a mut AttentionTrace>,
}

impl<'a> EvalHooks<'a> {
    pub fn plain(route: Route, branch: Branch) -> Self {
        Self { route, branch, kv: KvHook::None, trace: None }
    }

    pub fn with_kv(mut self, kv: KvHook<'a>) -> Self {
        self.kv = kv;
        self
    }

    pub fn with_trace(mut self, trace: Option<&'a mut AttentionTrace>) -> Self {
        self.trace = trace;
        self
    }
}

/// A noise-prediction network `eps_theta(z, t, c)`.
///
/// Implementations must be pure functions of their weights and inputs, and evaluate each
/// sample with a fixed reduction order so that batching never changes results.
pub trait Denoiser: Send + Sync {
    fn latent_shape(&self) -> LatentShape;

    /// Number of self-attention layers that can be captured or injected.
    fn layer_count(&self) -> usize;

    /// `(tokens, dim)` of each captured K or V tensor.
    fn kv_geometry(&self) -> (usize, usize);

    /// Spatial grid of the cross-attention maps, `(height, width)`.
    fn attention_grid(&self) -> (usize, usize);

    fn max_timestep(&self) -> usize;

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent>;

    fn check_inputs(&self, z: &Latent, t: usize) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(FecError::ShapeMismatch {
                expected: self.latent_shape().to_string(),
                actual: z.shape().to_string(),
            });
        }
        if t == 0 || t > self.max_timestep() {
            return Err(FecError::TimestepOutOfRange { t, lo: 1, hi: self.max_timestep() });
        }
        if !z.is_finite() {
            return Err(FecError::NonFinite { t });
        }
        Ok(())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn latent_shape(&self) -> LatentShape {
        (**self).latent_shape()
    }
    fn layer_count(&self) -> usize {
        (**self).layer_count()
    }
    fn kv_geometry(&self) -> (usize, usize) {
        (**self).kv_geometry()
    }
    fn attention_grid(&self) -> (usize, usize) {
        (**self).attention_grid()
    }
    fn max_timestep(&self) -> usize {
        (**self).max_timestep()
    }
    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent> {
        (**self).forward(z, t, cond, hooks)
    }
}

pub fn predict_noise(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    cond: &PromptEmbedding,
) -> Result<Latent> {
    net.forward(z, t, cond, &mut EvalHooks::plain(Route::Sampling, Branch::Cond))
}

/// Same output as [`predict_noise`]; additionally records K/V for every layer under
/// `(t, layer, branch)` and, if given, the cross-attention maps.
pub fn predict_noise_capture(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    cond: &PromptEmbedding,
    branch: Branch,
    cache: &mut KvCache,
    overwrite: bool,
    trace: Option<&mut AttentionTrace>,
) -> Result<Latent> {
    let mut hooks = EvalHooks::plain(Route::Capture, branch)
        .with_kv(KvHook::Capture { cache, overwrite })
        .with_trace(trace);
    net.forward(z, t, cond, &mut hooks)
}

/// Replaces K and V of the layers in `layers` by the cached tensors at `(t, branch)`.
pub fn predict_noise_inject(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    cond: &PromptEmbedding,
    branch: Branch,
    cache: &KvCache,
    layers: LayerRange,
) -> Result<Latent> {
    let mut hooks = EvalHooks::plain(Route::Sampling, branch)
        .with_kv(KvHook::Inject { cache, layers, values_only: false });
    net.forward(z, t, cond, &mut hooks)
}

/// Like [`predict_noise_inject`] but keeps the live keys.
pub fn predict_noise_inject_v_only(
    net: &dyn Denoiser,
    z: &Latent,
    t: usize,
    cond: &PromptEmbedding,
    branch: Branch,
    cache: &KvCache,
    layers: LayerRange,
) -> Result<Latent> {
    let mut hooks = EvalHooks::plain(Route::Sampling, branch)
        .with_kv(KvHook::Inject { cache, layers, values_only: true });
    net.forward(z, t, cond, &mut hooks)
}

/// Evaluates a batch of latents at one timestep. Rows are processed independently with
/// the single-sample kernel, so each row is bit-identical to its unbatched evaluation.
pub fn predict_noise_batch(
    net: &dyn Denoiser,
    zs: &[Latent],
    t: usize,
    cond: &PromptEmbedding,
) -> Result<Vec<Latent>> {
    zs.iter().map(|z| predict_noise(net, z, t, cond)).collect()
}

/// Per-route evaluation counters.
#[derive(Debug, Default)]
pub struct CallCounter {
    counts: [AtomicU64; 5],
}

impl CallCounter {
    pub fn record(&self, route: Route) {
        self.counts[route.index()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, route: Route) -> u64 {
        self.counts[route.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Route::ALL.iter().map(|&r| self.get(r)).sum()
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> Vec<(Route, u64)> {
        Route::ALL.iter().map(|&r| (r, self.get(r))).collect()
    }
}

/// Wraps a denoiser and charges every evaluation to the route named in its hooks.
#[derive(Debug)]
pub struct Counted<D> {
    inner: D,
    counter: CallCounter,
}

impl<D: Denoiser> Counted<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, counter: CallCounter::default() }
    }

    pub fn counter(&self) -> &CallCounter {
        &self.counter
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for Counted<D> {
    fn latent_shape(&self) -> LatentShape {
        self.inner.latent_shape()
    }
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }
    fn kv_geometry(&self) -> (usize, usize) {
        self.inner.kv_geometry()
    }
    fn attention_grid(&self) -> (usize, usize) {
        self.inner.attention_grid()
    }
    fn max_timestep(&self) -> usize {
        self.inner.max_timestep()
    }
    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &PromptEmbedding,
        hooks: &mut EvalHooks<'_>,
    ) -> Result<Latent> {
        self.counter.record(hooks.route);
        self.inner.forward(z, t, cond, hooks)
    }
}
