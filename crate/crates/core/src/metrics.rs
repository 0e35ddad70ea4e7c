//! Reconstruction metrics. Latents are treated directly as images.

use crate::error::{FecError, Result};
use crate::latent::Latent;
use crate::sampling::{SampleOutput, Trajectory};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean squared difference.
pub fn latent_loss(a: &Latent, b: &Latent) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len().max(1) as f64)
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(FecError::InvalidRequest(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = latent_loss(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized `SSIM_WINDOW x SSIM_WINDOW` Gaussian weights, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    g.iter().flat_map(|gy| g.iter().map(move |gx| gy * gx)).collect()
}

/// Mean SSIM over every fully contained window position and every channel, with
/// dynamic range `peak`.
pub fn ssim(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let shape = a.shape();
    if shape.height < SSIM_WINDOW || shape.width < SSIM_WINDOW {
        return Err(FecError::ImageTooSmall { height: shape.height, width: shape.width, window: SSIM_WINDOW });
    }
    if !(peak > 0.0) {
        return Err(FecError::InvalidRequest(format!("SSIM dynamic range must be positive, got {peak}")));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (rows, cols) = (shape.height - SSIM_WINDOW + 1, shape.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..shape.channels {
        for y0 in 0..rows {
            for x0 in 0..cols {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = window[dy * SSIM_WINDOW + dx];
                        let va = a.get(c, y0 + dy, x0 + dx);
                        let vb = b.get(c, y0 + dy, x0 + dx);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * (va * va);
                        sbb += w * (vb * vb);
                        sab += w * (va * vb);
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
        }
    }
    Ok(total / (shape.channels * rows * cols) as f64)
}

/// Latent loss between each sampled latent and the trajectory latent at the same
/// timestep, in sampling order.
pub fn trajectory_loss_curve(sampled: &SampleOutput, reference: &Trajectory) -> Result<Vec<(usize, f64)>> {
    sampled.path.iter().map(|(t, z)| Ok((*t, latent_loss(z, reference.get(*t)?)?))).collect()
}

/// The PSNR/SSIM peak for a source latent: its value range, or 1 for a constant latent.
pub fn peak_of(source: &Latent) -> f64 {
    let (lo, hi) = source.min_max();
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub latent_loss: f64,
    /// `f64::INFINITY` when the reconstruction is exact.
    pub psnr: f64,
    pub ssim: f64,
    pub per_step_losses: Vec<(usize, f64)>,
}

impl MetricsReport {
    /// Scores `output` against `source`, using the source's value range as peak.
    pub fn compute(output: &Latent, source: &Latent, per_step_losses: Vec<(usize, f64)>) -> Result<Self> {
        let peak = peak_of(source);
        Ok(Self {
            latent_loss: latent_loss(output, source)?,
            psnr: psnr(output, source, peak)?,
            ssim: ssim(output, source, peak)?,
            per_step_losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use proptest::prelude::*;

    fn lat(shape: LatentShape, k: f64) -> Latent {
        Latent::from_fn(shape, |c, y, x| ((c * 31 + y * 7 + x * 3) as f64 * 0.37 + k).sin())
    }

    #[test]
    fn loss_examples() {
        let s = LatentShape::new(1, 3, 4);
        assert_eq!(latent_loss(&lat(s, 0.0), &lat(s, 0.0)).unwrap(), 0.0);
        assert_eq!(latent_loss(&Latent::zeros(s), &Latent::filled(s, 1.0)).unwrap(), 1.0);
        assert!(latent_loss(&Latent::zeros(s), &Latent::zeros(LatentShape::new(1, 4, 3))).is_err());
    }

    #[test]
    fn psnr_examples() {
        let s = LatentShape::new(1, 2, 5);
        let a = Latent::zeros(s);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &Latent::filled(s, 2.0), 2.0).unwrap()).abs() < 1e-12);
        assert!((psnr(&a, &Latent::filled(s, 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let s = LatentShape::new(2, 12, 13);
        let a = lat(s, 0.3);
        assert_eq!(ssim(&a, &a, 2.0).unwrap(), 1.0);
        let mean = a.data().iter().sum::<f64>() / a.len() as f64;
        let centered = a.map(|v| v - mean);
        assert!(ssim(&centered, &centered.scale(-1.0), 2.0).unwrap() < 0.0);
        let small = LatentShape::new(1, 10, 20);
        assert!(matches!(
            ssim(&Latent::zeros(small), &Latent::zeros(small), 1.0),
            Err(FecError::ImageTooSmall { .. })
        ));
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_symmetric_nonnegative(v in prop::collection::vec(-5.0f64..5.0, 24), u in prop::collection::vec(-5.0f64..5.0, 24)) {
            let s = LatentShape::new(2, 3, 4);
            let (a, b) = (Latent::new(s, v).unwrap(), Latent::new(s, u).unwrap());
            let l = latent_loss(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l, latent_loss(&b, &a).unwrap());
            prop_assert_eq!(l == 0.0, a == b);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-6f64..10.0, extra in 1e-6f64..10.0, peak in 0.1f64..10.0) {
            let s = LatentShape::new(1, 1, 1);
            let z = Latent::zeros(s);
            let p1 = psnr(&z, &Latent::filled(s, m1.sqrt()), peak).unwrap();
            let p2 = psnr(&z, &Latent::filled(s, (m1 + extra).sqrt()), peak).unwrap();
            prop_assert!(p2 < p1);
        }

        #[test]
        fn ssim_reflexive_symmetric(v in prop::collection::vec(-3.0f64..3.0, 144), u in prop::collection::vec(-3.0f64..3.0, 144)) {
            let s = LatentShape::new(1, 12, 12);
            let (a, b) = (Latent::new(s, v).unwrap(), Latent::new(s, u).unwrap());
            prop_assert_eq!(ssim(&a, &a, 6.0).unwrap(), 1.0);
            let ab = ssim(&a, &b, 6.0).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a, 6.0).unwrap());
            prop_assert!(ab <= 1.0);
        }
    }
}
