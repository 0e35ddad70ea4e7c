//! Dense channel-major latent tensor.

use std::fmt;

use crate::error::{FecError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl Default for LatentShape {
    fn default() -> Self {
        Self::new(4, 16, 16)
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `channels x height x width` tensor stored row-major, channel outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: LatentShape,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(FecError::ShapeMismatch {
                expected: format!("{} entries ({shape})", shape.len()),
                actual: format!("{} entries", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: LatentShape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: LatentShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(FecError::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equally shaped latents.
    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Latent { shape: self.shape, data })
    }

    pub fn scale(&self, s: f64) -> Latent {
        self.map(|v| s * v)
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Latent) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rounds every entry through `f32`.
    pub fn to_f32_precision(&self) -> Latent {
        self.map(|v| v as f32 as f64)
    }
}
