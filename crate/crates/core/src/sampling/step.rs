//! Single-step DDIM updates, guidance, and their exact inverses.

use crate::error::{FecError, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

/// `w * eps_c + (1 - w) * eps_u`.
pub fn cfg_combine(eps_c: &Latent, eps_u: &Latent, scale: f64) -> Result<Latent> {
    let rest = 1.0 - scale;
    eps_c.zip_map(eps_u, |c, u| scale * c + rest * u)
}

fn check_order(t: usize, t_prev: usize) -> Result<()> {
    if t <= t_prev {
        return Err(FecError::TimestepOrder { t, t_prev });
    }
    Ok(())
}

/// Deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &Latent,
    eps: &Latent,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    check_order(t, t_prev)?;
    let (a_t, a_p) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sb_p) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    z_t.zip_map(eps, |z, e| sa_p * (z - sb_t * e) / sa_t + sb_p * e)
}

/// DDIM inversion update from `t_prev` up to `t`, reusing the same noise.
pub fn ddim_invert_step(
    z_prev: &Latent,
    eps: &Latent,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    check_order(t, t_prev)?;
    let (a_t, a_p) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sb_p) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    z_prev.zip_map(eps, |z, e| sa_t * (z - sb_p * e) / sa_p + sb_t * e)
}

/// The noise that makes [`ddim_step`] from `z_tilde_t` land on `z_target_prev`.
///
/// `ddim_step` is affine in its noise argument, `z_prev = a z_t + b eps` with
/// `a = sqrt(ab_p / ab_t)` and `b = sqrt(1 - ab_p) - sqrt(ab_p (1 - ab_t) / ab_t)`, so
/// the answer is `(z_target_prev - a z_t) / b`.
pub fn desired_noise(
    z_tilde_t: &Latent,
    z_target_prev: &Latent,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    check_order(t, t_prev)?;
    let (a_t, a_p) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
    let a = (a_p / a_t).sqrt();
    let b = (1.0 - a_p).sqrt() - (a_p * (1.0 - a_t) / a_t).sqrt();
    if b == 0.0 || !b.is_finite() {
        return Err(FecError::DegenerateStep { t, t_prev });
    }
    z_tilde_t.zip_map(z_target_prev, |z, target| (target - a * z) / b)
}

/// The unconditional noise for which `cfg_combine(eps_c, ., scale) = eps_t`.
pub fn desired_uncond(eps_t: &Latent, eps_c: &Latent, scale: f64) -> Result<Latent> {
    if scale == 1.0 {
        return Err(FecError::DegenerateGuidance);
    }
    let denom = 1.0 - scale;
    eps_t.zip_map(eps_c, |e, c| (e - scale * c) / denom)
}
