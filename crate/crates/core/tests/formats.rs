use std::io::Cursor;

use fec_core::denoiser::{Branch, KvCache, KvPair};
use fec_core::editing::{EditMask, MaskProvenance};
use fec_core::error::FecError;
use fec_core::io::FloatWidth;
use fec_core::latent::{Latent, LatentShape};
use fec_core::sampling::Trajectory;
use fec_core::schedule::{timestep_plan, TimestepPlan};

/// Minimal independent reader for the little-endian fields.
struct Bytes<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Bytes<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }
}

fn trajectory() -> Trajectory {
    let s = LatentShape::new(2, 2, 3);
    let plan = timestep_plan(4, 1000).unwrap();
    let mut tr = Trajectory::new(plan.clone(), 7.5, 99, Latent::from_fn(s, |c, y, x| (c * 100 + y * 10 + x) as f64));
    for &t in plan.timesteps() {
        tr.insert(t, Latent::from_fn(s, |c, y, x| t as f64 + (c * 100 + y * 10 + x) as f64 / 1000.0)).unwrap();
    }
    tr
}

#[test]
fn trajectory_layout() {
    let tr = trajectory();
    let mut buf = Vec::new();
    tr.write_to(&mut buf, FloatWidth::F64).unwrap();
    let mut r = Bytes { buf: &buf, at: 0 };
    assert_eq!(r.take(8), b"FECTRAJ1");
    assert_eq!(r.u32(), 1);
    assert_eq!(r.u32(), 4);
    assert_eq!((0..4).map(|_| r.u32()).collect::<Vec<_>>(), vec![1000, 750, 500, 250]);
    assert_eq!((r.u32(), r.u32(), r.u32()), (2, 2, 3));
    assert_eq!(r.u8(), 64);
    assert_eq!(r.f64(), 7.5);
    assert_eq!(r.u64(), 99);
    for t in [1000usize, 750, 500, 250, 0] {
        let z = tr.get(t).unwrap();
        for &v in z.data() {
            assert_eq!(r.f64(), v);
        }
    }
    assert_eq!(r.at, buf.len());
    assert_eq!(Trajectory::read_from(&mut Cursor::new(&buf), 1000).unwrap(), tr);
}

#[test]
fn trajectory_single_precision_rounds() {
    let tr = trajectory().to_f32_precision();
    let mut buf = Vec::new();
    tr.write_to(&mut buf, FloatWidth::F32).unwrap();
    let header = 8 + 4 + 4 + 4 * 4 + 3 * 4 + 1 + 8 + 8;
    assert_eq!(buf.len(), header + 5 * 12 * 4);
    let mut r = Bytes { buf: &buf, at: header };
    assert_eq!(r.f32() as f64, tr.get(1000).unwrap().data()[0]);
    assert_eq!(Trajectory::read_from(&mut Cursor::new(&buf), 1000).unwrap(), tr);
}

#[test]
fn trajectory_rejects_damage() {
    let mut buf = Vec::new();
    trajectory().write_to(&mut buf, FloatWidth::F64).unwrap();
    let truncated = &buf[..buf.len() - 3];
    assert!(Trajectory::read_from(&mut Cursor::new(truncated), 1000).is_err());
    let mut bad_version = buf.clone();
    bad_version[8] = 9;
    assert!(matches!(Trajectory::read_from(&mut Cursor::new(&bad_version), 1000), Err(FecError::Format(_))));
    let mut incomplete = trajectory();
    incomplete = Trajectory::new(incomplete.plan().clone(), 1.0, 0, incomplete.source().clone());
    assert!(incomplete.write_to(&mut Vec::new(), FloatWidth::F64).is_err());
    // A zero-step file holds only the source latent.
    let lone = Trajectory::new(TimestepPlan::empty(1000), 1.0, 0, Latent::filled(LatentShape::new(1, 1, 2), 3.0));
    let mut buf = Vec::new();
    lone.write_to(&mut buf, FloatWidth::F64).unwrap();
    assert_eq!(Trajectory::read_from(&mut Cursor::new(&buf), 1000).unwrap(), lone);
}

#[test]
fn kv_layout() {
    let mut cache = KvCache::new(2, 1, 2);
    let pair = |k: f64| KvPair { keys: vec![k, k + 1.0], values: vec![k + 2.0, k + 3.0] };
    cache.insert(20, 0, Branch::Cond, pair(0.0), false).unwrap();
    cache.insert(20, 1, Branch::Cond, pair(10.0), false).unwrap();
    cache.insert(20, 1, Branch::Uncond, pair(20.0), false).unwrap();
    cache.insert(40, 0, Branch::Uncond, pair(30.0), false).unwrap();
    let mut buf = Vec::new();
    cache.write_to(&mut buf, FloatWidth::F64).unwrap();
    let mut r = Bytes { buf: &buf, at: 0 };
    assert_eq!(r.take(6), b"FECKV1");
    assert_eq!((r.u32(), r.u32(), r.u32(), r.u32(), r.u32()), (1, 2, 2, 1, 2));
    assert_eq!(r.u8(), 64);
    assert_eq!(r.u32(), 3);
    // t descending, layer ascending
    assert_eq!((r.u32(), r.u32(), r.u8()), (40, 0, 2));
    assert_eq!((0..4).map(|_| r.f64()).collect::<Vec<_>>(), vec![30.0, 31.0, 32.0, 33.0]);
    assert_eq!((r.u32(), r.u32(), r.u8()), (20, 0, 1));
    r.take(32);
    assert_eq!((r.u32(), r.u32(), r.u8()), (20, 1, 3));
    assert_eq!(r.f64(), 10.0);
    r.take(24);
    assert_eq!(r.f64(), 20.0);
    r.take(24);
    assert_eq!(r.at, buf.len());
    assert_eq!(KvCache::read_from(&mut Cursor::new(&buf)).unwrap(), cache);
    assert!(matches!(cache.insert(20, 0, Branch::Cond, pair(0.0), false), Err(FecError::DuplicateCapture { .. })));
}

#[test]
fn mask_layout() {
    let mask = EditMask::rect(3, 4, 1, 2, 0, 3).unwrap();
    assert_eq!(mask.provenance(), MaskProvenance::UserSupplied);
    let mut buf = Vec::new();
    mask.write_to(&mut buf, FloatWidth::F32).unwrap();
    let mut r = Bytes { buf: &buf, at: 0 };
    assert_eq!(r.take(8), b"FECMASK1");
    assert_eq!(r.u32(), 1);
    assert_eq!(r.u32(), 0);
    assert_eq!((r.u32(), r.u32(), r.u32()), (1, 3, 4));
    assert_eq!(r.u8(), 32);
    r.take(16);
    let values: Vec<f32> = (0..12).map(|_| r.f32()).collect();
    assert_eq!(values, vec![0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0.]);
    assert_eq!(r.at, buf.len());
    assert_eq!(EditMask::read_from(&mut Cursor::new(&buf)).unwrap(), mask);
    assert!(EditMask::new(1, 2, vec![0.0, 1.5], MaskProvenance::UserSupplied).is_err());
}
