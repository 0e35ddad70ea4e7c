//! Noise schedules, timestep plans and the forward noising process.

use std::fmt;
use std::str::FromStr;

use crate::error::{FecError, Result};
use crate::latent::Latent;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// How betas evolve over the training timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Betas linear in `t` from `beta_start` to `beta_end`.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Square roots of the betas linear in `t` (the latent-diffusion default).
    ScaledLinearBeta { beta_start: f64, beta_end: f64 },
    ConstantBeta { beta: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::ScaledLinearBeta { beta_start: 0.00085, beta_end: 0.012 }
    }
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta { .. } => "linear-beta",
            ScheduleKind::ScaledLinearBeta { .. } => "scaled-linear-beta",
            ScheduleKind::ConstantBeta { .. } => "constant-beta",
        }
    }

    /// Builds a kind from its name and the configured beta endpoints. `constant-beta` uses
    /// `beta_start` as its value.
    pub fn from_parts(name: &str, beta_start: f64, beta_end: f64) -> Result<Self> {
        match name {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta { beta_start, beta_end }),
            "scaled-linear-beta" | "scaled-linear" => {
                Ok(ScheduleKind::ScaledLinearBeta { beta_start, beta_end })
            }
            "constant-beta" | "constant" => Ok(ScheduleKind::ConstantBeta { beta: beta_start }),
            other => Err(FecError::InvalidScheduleKind(other.to_string())),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = FecError;

    /// Parses a kind name with its default endpoints.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta { beta_start: 1e-4, beta_end: 0.02 }),
            "scaled-linear-beta" | "scaled-linear" => Ok(ScheduleKind::default()),
            "constant-beta" | "constant" => Ok(ScheduleKind::ConstantBeta { beta: 0.01 }),
            other => Err(FecError::InvalidScheduleKind(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar[t]` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(FecError::TimestepOutOfRange {
            t,
            lo: 0,
            hi: self.total_train_steps(),
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(ScheduleKind::default(), DEFAULT_TRAIN_STEPS)
            .expect("default schedule is valid")
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

pub fn build_schedule(kind: ScheduleKind, total_train_steps: usize) -> Result<NoiseSchedule> {
    if total_train_steps == 0 {
        return Err(FecError::InvalidSchedule("T must be at least 1".into()));
    }
    let betas = match kind {
        ScheduleKind::LinearBeta { beta_start, beta_end } => {
            linspace(beta_start, beta_end, total_train_steps)
        }
        ScheduleKind::ScaledLinearBeta { beta_start, beta_end } => {
            if beta_start < 0.0 || beta_end < 0.0 {
                return Err(FecError::InvalidSchedule("scaled-linear betas must be >= 0".into()));
            }
            linspace(beta_start.sqrt(), beta_end.sqrt(), total_train_steps)
                .into_iter()
                .map(|b| b * b)
                .collect()
        }
        ScheduleKind::ConstantBeta { beta } => vec![beta; total_train_steps],
    };
    if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
        return Err(FecError::InvalidSchedule(format!("beta {b} outside [0, 1)")));
    }

    let mut alpha_bar = Vec::with_capacity(total_train_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for beta in betas {
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

/// Forward process: `sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn add_noise(z0: &Latent, eps: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    let total = sched.total_train_steps();
    if t == 0 || t > total {
        return Err(FecError::TimestepOutOfRange { t, lo: 1, hi: total });
    }
    let a = sched.alpha_bar(t)?;
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    z0.zip_map(eps, |z, e| signal * z + noise * e)
}

/// Strictly decreasing sampling timesteps; inversion walks them in reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    total_train_steps: usize,
    timesteps: Vec<usize>,
}

impl TimestepPlan {
    /// A plan from explicit timesteps, which must be strictly decreasing within `[1, T]`.
    pub fn from_timesteps(timesteps: Vec<usize>, total_train_steps: usize) -> Result<Self> {
        if timesteps.iter().any(|&t| t == 0 || t > total_train_steps) {
            return Err(FecError::InvalidPlan(format!("timesteps must lie in [1, {total_train_steps}]")));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(FecError::InvalidPlan("timesteps must be strictly decreasing".into()));
        }
        Ok(Self { total_train_steps, timesteps })
    }

    /// The zero-step plan: inversion returns only the source latent.
    pub fn empty(total_train_steps: usize) -> Self {
        Self { total_train_steps, timesteps: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn total_train_steps(&self) -> usize {
        self.total_train_steps
    }

    /// Sampling order, noisiest first.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The timestep sampling starts from, or `0` for an empty plan.
    pub fn start(&self) -> usize {
        self.timesteps.first().copied().unwrap_or(0)
    }

    /// Inversion order, least noisy first.
    pub fn ascending(&self) -> Vec<usize> {
        self.timesteps.iter().rev().copied().collect()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair lands on `t_prev = 0`.
    pub fn sampling_pairs(&self) -> Vec<(usize, usize)> {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// `(t_prev, t)` pairs in inversion order, starting from `t_prev = 0`.
    pub fn inversion_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = self.sampling_pairs();
        pairs.reverse();
        pairs.into_iter().map(|(t, t_prev)| (t_prev, t)).collect()
    }

    /// Every latent a trajectory over this plan holds: the plan plus `t = 0`, descending.
    pub fn trajectory_keys(&self) -> Vec<usize> {
        let mut keys = self.timesteps.clone();
        keys.push(0);
        keys
    }
}

/// Evenly spaced plan starting at `T` with stride `T / steps`; the remainder of an uneven
/// division ends up in the final jump down to `t = 0`.
pub fn timestep_plan(steps: usize, total_train_steps: usize) -> Result<TimestepPlan> {
    if steps == 0 || steps > total_train_steps {
        return Err(FecError::InvalidPlan(format!(
            "steps must lie in [1, {total_train_steps}], got {steps}"
        )));
    }
    let stride = total_train_steps / steps;
    let timesteps = (0..steps).map(|i| total_train_steps - i * stride).collect();
    Ok(TimestepPlan { total_train_steps, timesteps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use proptest::prelude::*;

    #[test]
    fn zero_beta_keeps_signal() {
        let s = build_schedule(ScheduleKind::ConstantBeta { beta: 0.0 }, 10).unwrap();
        assert!(s.alpha_bars().iter().all(|&a| a == 1.0));
        assert_eq!(s.alpha_bars().len(), 11);
    }

    #[test]
    fn constant_beta_cumulative_product() {
        let s = build_schedule(ScheduleKind::ConstantBeta { beta: 0.1 }, 2).unwrap();
        let a = s.alpha_bars();
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 0.9).abs() < 1e-15);
        assert!((a[2] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_default_is_monotone() {
        let s = NoiseSchedule::default();
        let a = s.alpha_bars();
        assert_eq!(s.total_train_steps(), 1000);
        assert!(a.windows(2).all(|w| w[1] < w[0]));
        // Reference cumulative product computed offline: 0.0046600985...
        assert!(a[1000] < 0.01);
        assert!((a[1000] - 0.004660098513077238).abs() < 1e-12);
    }

    #[test]
    fn schedule_errors() {
        assert!(build_schedule(ScheduleKind::default(), 0).is_err());
        assert!(build_schedule(ScheduleKind::ConstantBeta { beta: 1.0 }, 5).is_err());
        assert!(matches!("cosine".parse::<ScheduleKind>(), Err(FecError::InvalidScheduleKind(_))));
        assert!(ScheduleKind::from_parts("bogus", 0.1, 0.2).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let shape = LatentShape::new(1, 2, 2);
        let sched = build_schedule(ScheduleKind::ConstantBeta { beta: 0.1 }, 2).unwrap();
        let z0 = Latent::filled(shape, 3.0);

        let noiseless = add_noise(&z0, &Latent::zeros(shape), 1, &sched).unwrap();
        assert!(noiseless.data().iter().all(|&v| v == 0.9f64.sqrt() * 3.0));

        let pure = add_noise(&Latent::zeros(shape), &Latent::filled(shape, 1.0), 2, &sched).unwrap();
        for &v in pure.data() {
            assert!((v - 0.19f64.sqrt()).abs() < 1e-15);
        }

        let flat = build_schedule(ScheduleKind::ConstantBeta { beta: 0.0 }, 4).unwrap();
        let same = add_noise(&z0, &Latent::filled(shape, 5.0), 3, &flat).unwrap();
        assert!(same.bit_eq(&z0));
    }

    #[test]
    fn add_noise_errors() {
        let sched = NoiseSchedule::default();
        let a = Latent::zeros(LatentShape::new(1, 2, 2));
        let b = Latent::zeros(LatentShape::new(1, 2, 3));
        assert!(matches!(add_noise(&a, &b, 5, &sched), Err(FecError::ShapeMismatch { .. })));
        assert!(matches!(add_noise(&a, &a, 0, &sched), Err(FecError::TimestepOutOfRange { .. })));
        assert!(matches!(add_noise(&a, &a, 1001, &sched), Err(FecError::TimestepOutOfRange { .. })));
    }

    #[test]
    fn plan_examples() {
        let full = timestep_plan(10, 10).unwrap();
        assert_eq!(full.timesteps(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);

        let p = timestep_plan(50, 1000).unwrap();
        assert_eq!(p.steps(), 50);
        assert_eq!(p.timesteps()[0], 1000);
        assert_eq!(*p.timesteps().last().unwrap(), 20);
        assert!(p.timesteps().windows(2).all(|w| w[0] - w[1] == 20));

        assert_eq!(timestep_plan(1, 1000).unwrap().timesteps(), &[1000]);
        assert!(timestep_plan(11, 10).is_err());
        assert!(timestep_plan(0, 10).is_err());
    }

    #[test]
    fn uneven_plan_absorbs_residue_at_low_end() {
        let p = timestep_plan(3, 10).unwrap();
        assert_eq!(p.timesteps(), &[10, 7, 4]);
        assert_eq!(p.sampling_pairs(), vec![(10, 7), (7, 4), (4, 0)]);
        assert_eq!(p.inversion_pairs(), vec![(0, 4), (4, 7), (7, 10)]);
        assert_eq!(p.trajectory_keys(), vec![10, 7, 4, 0]);
    }

    proptest! {
        #[test]
        fn nonzero_beta_is_strictly_decreasing(beta in 1e-4f64..0.05, t in 1usize..400) {
            let s = build_schedule(ScheduleKind::ConstantBeta { beta }, t).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
        }

        #[test]
        fn add_noise_is_linear(a in -3.0f64..3.0, t in 1usize..=1000, seed in 0u64..1000) {
            let sched = NoiseSchedule::default();
            let shape = LatentShape::new(1, 3, 3);
            let z0 = Latent::from_fn(shape, |_, y, x| ((seed as usize + 3 * y + x) % 7) as f64 - 3.0);
            let eps = Latent::from_fn(shape, |_, y, x| ((seed as usize * 5 + y + 2 * x) % 5) as f64 - 2.0);
            let lhs = add_noise(&z0.scale(a), &eps.scale(a), t, &sched).unwrap();
            let rhs = add_noise(&z0, &eps, t, &sched).unwrap().scale(a);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }

        #[test]
        fn plan_is_a_subsequence(total in 1usize..2000, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let p = timestep_plan(steps, total).unwrap();
            prop_assert_eq!(p.steps(), steps);
            prop_assert!(p.timesteps().iter().all(|&t| (1..=total).contains(&t)));
            prop_assert!(p.timesteps().windows(2).all(|w| w[0] > w[1]));
            let mut twice = p.ascending();
            twice.reverse();
            prop_assert_eq!(twice.as_slice(), p.timesteps());
            if total % steps == 0 {
                let stride = total / steps;
                prop_assert!(p.timesteps().windows(2).all(|w| w[0] - w[1] == stride));
            }
        }
    }
}
