//! Inversion trajectories and the `FECTRAJ1` container.
//!
//! ## `FECTRAJ1` layout (little-endian)
//!
//! ```text
//! magic        8 bytes  "FECTRAJ1"
//! version      u32      1
//! steps        u32      S
//! timesteps    S x u32  sampling order (descending)
//! channels     u32
//! height       u32
//! width        u32
//! float_width  u8       32 or 64
//! guidance     f64      inversion guidance scale
//! seed         u64
//! latents      (S + 1) tensors, one per timestep in the order above, then t = 0;
//!              each channels x height x width row-major floats
//! ```
//!
//! Edit masks reuse this layout under the `FECMASK1` magic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FecError, Result};
use crate::io::{self, FloatWidth};
use crate::latent::{Latent, LatentShape};
use crate::schedule::TimestepPlan;

pub const TRAJECTORY_MAGIC: &[u8] = b"FECTRAJ1";
const SERIES_VERSION: usize = 1;

/// Decoded contents of a `FECTRAJ1`-layout file.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Series {
    pub timesteps: Vec<usize>,
    pub shape: LatentShape,
    pub guidance: f64,
    pub seed: u64,
    /// One tensor per timestep, then the `t = 0` tensor.
    pub latents: Vec<Latent>,
}

pub(crate) fn write_series(
    w: &mut impl Write,
    magic: &[u8],
    series: &Series,
    width: FloatWidth,
) -> Result<()> {
    if series.latents.len() != series.timesteps.len() + 1 {
        return Err(FecError::Format(format!(
            "{} timesteps need {} tensors, got {}",
            series.timesteps.len(),
            series.timesteps.len() + 1,
            series.latents.len()
        )));
    }
    io::write_magic(w, magic)?;
    io::write_u32(w, SERIES_VERSION)?;
    io::write_u32(w, series.timesteps.len())?;
    for &t in &series.timesteps {
        io::write_u32(w, t)?;
    }
    io::write_u32(w, series.shape.channels)?;
    io::write_u32(w, series.shape.height)?;
    io::write_u32(w, series.shape.width)?;
    io::write_u8(w, width.bits())?;
    io::write_f64(w, series.guidance)?;
    io::write_u64(w, series.seed)?;
    for z in &series.latents {
        z.ensure_same_shape(&Latent::zeros(series.shape))?;
        io::write_floats(w, z.data(), width)?;
    }
    Ok(())
}

pub(crate) fn read_series(r: &mut impl Read, magic: &[u8]) -> Result<Series> {
    io::read_magic(r, magic)?;
    let version = io::read_u32(r)?;
    if version != SERIES_VERSION {
        return Err(FecError::Format(format!("unsupported version {version}")));
    }
    let steps = io::read_u32(r)?;
    let timesteps = (0..steps).map(|_| io::read_u32(r)).collect::<Result<Vec<_>>>()?;
    let shape = LatentShape::new(io::read_u32(r)?, io::read_u32(r)?, io::read_u32(r)?);
    let width = FloatWidth::from_bits(io::read_u8(r)?)?;
    let guidance = io::read_f64(r)?;
    let seed = io::read_u64(r)?;
    let latents = (0..=steps)
        .map(|_| Latent::new(shape, io::read_floats(r, shape.len(), width)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Series { timesteps, shape, guidance, seed, latents })
}

/// Inversion latents keyed by timestep: every planned timestep plus the source at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    plan: TimestepPlan,
    guidance: f64,
    seed: u64,
    latents: BTreeMap<usize, Latent>,
}

impl Trajectory {
    /// A trajectory holding only the source latent.
    pub fn new(plan: TimestepPlan, guidance: f64, seed: u64, source: Latent) -> Self {
        let mut latents = BTreeMap::new();
        latents.insert(0, source);
        Self { plan, guidance, seed, latents }
    }

    pub fn plan(&self) -> &TimestepPlan {
        &self.plan
    }

    pub fn guidance(&self) -> f64 {
        self.guidance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Stores `z` at a planned timestep.
    pub fn insert(&mut self, t: usize, z: Latent) -> Result<()> {
        if t != 0 && !self.plan.timesteps().contains(&t) {
            return Err(FecError::InvalidPlan(format!("timestep {t} is not in the plan")));
        }
        self.source().ensure_same_shape(&z)?;
        self.latents.insert(t, z);
        Ok(())
    }

    pub fn get(&self, t: usize) -> Result<&Latent> {
        self.latents.get(&t).ok_or(FecError::MissingTrajectoryEntry { t })
    }

    /// The encoded source latent `z_0`.
    pub fn source(&self) -> &Latent {
        &self.latents[&0]
    }

    /// The noisiest latent, `z_T` of the plan (or `z_0` for an empty plan).
    pub fn end(&self) -> Result<&Latent> {
        self.get(self.plan.start())
    }

    /// Timesteps present, descending.
    pub fn timesteps(&self) -> Vec<usize> {
        self.latents.keys().rev().copied().collect()
    }

    /// Fails with the first timestep of `plan` (or `t = 0`) that is missing.
    pub fn ensure_covers(&self, plan: &TimestepPlan) -> Result<()> {
        for t in plan.trajectory_keys() {
            self.get(t)?;
        }
        Ok(())
    }

    /// Rounds every latent through `f32`.
    pub fn to_f32_precision(&self) -> Trajectory {
        Trajectory {
            latents: self.latents.iter().map(|(&t, z)| (t, z.to_f32_precision())).collect(),
            ..self.clone()
        }
    }

    pub fn write_to(&self, w: &mut impl Write, width: FloatWidth) -> Result<()> {
        self.ensure_covers(&self.plan)?;
        let latents =
            self.plan.trajectory_keys().iter().map(|t| self.latents[t].clone()).collect();
        let series = Series {
            timesteps: self.plan.timesteps().to_vec(),
            shape: self.source().shape(),
            guidance: self.guidance,
            seed: self.seed,
            latents,
        };
        write_series(w, TRAJECTORY_MAGIC, &series, width)
    }

    /// Reads a trajectory over a plan with `total_train_steps` training steps.
    pub fn read_from(r: &mut impl Read, total_train_steps: usize) -> Result<Self> {
        let series = read_series(r, TRAJECTORY_MAGIC)?;
        let plan = TimestepPlan::from_timesteps(series.timesteps, total_train_steps)?;
        let keys = plan.trajectory_keys();
        let mut latents = series.latents;
        let source = latents.pop().expect("series holds at least one tensor");
        let mut traj = Trajectory::new(plan, series.guidance, series.seed, source);
        for (t, z) in keys.into_iter().zip(latents) {
            traj.insert(t, z)?;
        }
        Ok(traj)
    }

    pub fn save(&self, path: &Path, width: FloatWidth) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w, width)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, total_train_steps: usize) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?), total_train_steps)
    }
}
