use crate::denoiser::AttentionTrace;
use crate::error::{FecError, Result};
use crate::latent::LatentShape;

/// Supplies the spatial blend mask `M_t` for each FEC-noise editing step.
///
/// A mask is `height x width` of the latent, row-major, with values in `[0, 1]`; it
/// weights the live unconditional noise against the desired one and is shared by all
/// channels.
pub trait MaskProvider {
    /// Whether [`MaskProvider::mask`] needs the cross-attention of the step's conditional
    /// evaluation.
    fn wants_trace(&self) -> bool {
        false
    }

    fn mask(&mut self, t: usize, trace: Option<&AttentionTrace>, shape: LatentShape) -> Result<Vec<f64>>;
}

/// `M = 0`: every position follows the reference trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroMask;

impl MaskProvider for ZeroMask {
    fn mask(&mut self, _t: usize, _trace: Option<&AttentionTrace>, shape: LatentShape) -> Result<Vec<f64>> {
        Ok(vec![0.0; shape.spatial()])
    }
}

/// `M = 1`: every position keeps the live noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullMask;

impl MaskProvider for FullMask {
    fn mask(&mut self, _t: usize, _trace: Option<&AttentionTrace>, shape: LatentShape) -> Result<Vec<f64>> {
        Ok(vec![1.0; shape.spatial()])
    }
}

pub(crate) fn validate_mask(mask: &[f64], shape: LatentShape) -> Result<()> {
    if mask.len() != shape.spatial() {
        return Err(FecError::InvalidMask(format!(
            "{} values for a {}x{} grid",
            mask.len(),
            shape.height,
            shape.width
        )));
    }
    if let Some(v) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(FecError::InvalidMask(format!("value {v} outside [0, 1]")));
    }
    Ok(())
}
