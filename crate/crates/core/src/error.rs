use thiserror::Error;

/// Errors raised by schedules, denoisers, samplers and the file formats.
#[derive(Error, Debug)]
pub enum FecError {
    #[error("unknown schedule kind `{0}`")]
    InvalidScheduleKind(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("timesteps must satisfy t > t_prev (got t = {t}, t_prev = {t_prev})")]
    TimestepOrder { t: usize, t_prev: usize },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("degenerate step between t = {t} and t_prev = {t_prev}: noise coefficient is zero")]
    DegenerateStep { t: usize, t_prev: usize },

    #[error("guidance scale 1 makes the unconditional noise unrecoverable")]
    DegenerateGuidance,

    #[error("non-finite latent at timestep {t}")]
    NonFinite { t: usize },

    #[error("missing trajectory latent at timestep {t}")]
    MissingTrajectoryEntry { t: usize },

    #[error("missing KV cache entry at timestep {t}, layer {layer}")]
    MissingCacheEntry { t: usize, layer: usize },

    #[error("KV already captured at timestep {t}, layer {layer}")]
    DuplicateCapture { t: usize, layer: usize },

    #[error("layer range [{start}, {end}) outside [0, {layers}]")]
    LayerRange { start: usize, end: usize, layers: usize },

    #[error("blend word `{0}` does not occur in the prompt")]
    BlendWordMissing(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid edit request: {0}")]
    InvalidRequest(String),

    #[error("unknown latent kind `{0}`")]
    UnknownLatentKind(String),

    #[error("image {height}x{width} smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { height: usize, width: usize, window: usize },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FecError> = std::result::Result<T, E>;
