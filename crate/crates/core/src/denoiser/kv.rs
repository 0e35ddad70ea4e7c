//! Self-attention key/value cache recorded during inversion.
//!
//! ## `FECKV1` layout (little-endian)
//!
//! ```text
//! magic        6 bytes  "FECKV1"
//! version      u32      1
//! steps        u32      distinct timesteps
//! layer_count  u32
//! tokens       u32      rows of each K / V tensor
//! dim          u32      columns of each K / V tensor
//! float_width  u8       32 or 64
//! entries      u32
//! entry*       ordered by t descending, then layer ascending:
//!   t          u32
//!   layer      u32
//!   branches   u8       bit 0 = cond present, bit 1 = uncond present
//!   per present branch (cond first): K then V, tokens x dim row-major floats
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::Branch;
use crate::error::{FecError, Result};
use crate::io::{self, FloatWidth};

pub const KV_MAGIC: &[u8] = b"FECKV1";
const KV_VERSION: usize = 1;

/// Keys and values of one self-attention layer, each `tokens x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Both guidance branches recorded at one `(t, layer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvSlot {
    pub cond: Option<KvPair>,
    pub uncond: Option<KvPair>,
}

impl KvSlot {
    pub fn get(&self, branch: Branch) -> Option<&KvPair> {
        match branch {
            Branch::Cond => self.cond.as_ref(),
            Branch::Uncond => self.uncond.as_ref(),
        }
    }

    fn slot_mut(&mut self, branch: Branch) -> &mut Option<KvPair> {
        match branch {
            Branch::Cond => &mut self.cond,
            Branch::Uncond => &mut self.uncond,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layer_count: usize,
    tokens: usize,
    dim: usize,
    entries: BTreeMap<(usize, usize), KvSlot>,
}

impl KvCache {
    pub fn new(layer_count: usize, tokens: usize, dim: usize) -> Self {
        Self { layer_count, tokens, dim, entries: BTreeMap::new() }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.tokens, self.dim)
    }

    /// Number of `(t, layer)` entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct timesteps, descending.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.entries.keys().map(|&(t, _)| t).collect();
        ts.dedup();
        ts.reverse();
        ts
    }

    pub fn steps(&self) -> usize {
        self.timesteps().len()
    }

    pub fn has(&self, t: usize, layer: usize, branch: Branch) -> bool {
        self.entries.get(&(t, layer)).and_then(|s| s.get(branch)).is_some()
    }

    pub fn slot(&self, t: usize, layer: usize) -> Option<&KvSlot> {
        self.entries.get(&(t, layer))
    }

    pub fn get(&self, t: usize, layer: usize, branch: Branch) -> Result<&KvPair> {
        self.entries
            .get(&(t, layer))
            .and_then(|s| s.get(branch))
            .ok_or(FecError::MissingCacheEntry { t, layer })
    }

    pub fn insert(
        &mut self,
        t: usize,
        layer: usize,
        branch: Branch,
        pair: KvPair,
        overwrite: bool,
    ) -> Result<()> {
        if layer >= self.layer_count {
            return Err(FecError::LayerRange { start: layer, end: layer + 1, layers: self.layer_count });
        }
        let n = self.tokens * self.dim;
        if pair.keys.len() != n || pair.values.len() != n {
            return Err(FecError::ShapeMismatch {
                expected: format!("{}x{}", self.tokens, self.dim),
                actual: format!("{} keys / {} values", pair.keys.len(), pair.values.len()),
            });
        }
        let slot = self.entries.entry((t, layer)).or_default().slot_mut(branch);
        if slot.is_some() && !overwrite {
            return Err(FecError::DuplicateCapture { t, layer });
        }
        *slot = Some(pair);
        Ok(())
    }

    /// Fails with the first missing `(t, layer)` for `branch`.
    pub fn ensure_covers(&self, timesteps: &[usize], branch: Branch) -> Result<()> {
        for &t in timesteps {
            for layer in 0..self.layer_count {
                if !self.has(t, layer, branch) {
                    return Err(FecError::MissingCacheEntry { t, layer });
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write, width: FloatWidth) -> Result<()> {
        io::write_magic(w, KV_MAGIC)?;
        io::write_u32(w, KV_VERSION)?;
        io::write_u32(w, self.steps())?;
        io::write_u32(w, self.layer_count)?;
        io::write_u32(w, self.tokens)?;
        io::write_u32(w, self.dim)?;
        io::write_u8(w, width.bits())?;
        io::write_u32(w, self.entries.len())?;
        for t in self.timesteps() {
            for layer in 0..self.layer_count {
                let Some(slot) = self.entries.get(&(t, layer)) else { continue };
                io::write_u32(w, t)?;
                io::write_u32(w, layer)?;
                let mask = u8::from(slot.cond.is_some()) | (u8::from(slot.uncond.is_some()) << 1);
                io::write_u8(w, mask)?;
                for pair in [&slot.cond, &slot.uncond].into_iter().flatten() {
                    io::write_floats(w, &pair.keys, width)?;
                    io::write_floats(w, &pair.values, width)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::read_magic(r, KV_MAGIC)?;
        let version = io::read_u32(r)?;
        if version != KV_VERSION {
            return Err(FecError::Format(format!("unsupported FECKV version {version}")));
        }
        let steps = io::read_u32(r)?;
        let layer_count = io::read_u32(r)?;
        let tokens = io::read_u32(r)?;
        let dim = io::read_u32(r)?;
        let width = FloatWidth::from_bits(io::read_u8(r)?)?;
        let count = io::read_u32(r)?;
        let mut cache = KvCache::new(layer_count, tokens, dim);
        let mut last: Option<(usize, usize)> = None;
        for _ in 0..count {
            let t = io::read_u32(r)?;
            let layer = io::read_u32(r)?;
            if let Some((pt, pl)) = last {
                if !(t < pt || (t == pt && layer > pl)) {
                    return Err(FecError::Format("KV entries out of order".into()));
                }
            }
            last = Some((t, layer));
            let mask = io::read_u8(r)?;
            if mask == 0 || mask > 3 {
                return Err(FecError::Format(format!("bad branch mask {mask}")));
            }
            for (bit, branch) in [(1u8, Branch::Cond), (2u8, Branch::Uncond)] {
                if mask & bit != 0 {
                    let keys = io::read_floats(r, tokens * dim, width)?;
                    let values = io::read_floats(r, tokens * dim, width)?;
                    cache.insert(t, layer, branch, KvPair { keys, values }, false)?;
                }
            }
        }
        if cache.steps() != steps {
            return Err(FecError::Format(format!(
                "header declares {steps} steps, payload holds {}",
                cache.steps()
            )));
        }
        Ok(cache)
    }

    pub fn save(&self, path: &std::path::Path, width: FloatWidth) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w, width)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seed: f64, n: usize) -> KvPair {
        KvPair {
            keys: (0..n).map(|i| seed + i as f64 * 0.25).collect(),
            values: (0..n).map(|i| -seed - i as f64 / 3.0).collect(),
        }
    }

    #[test]
    fn duplicate_capture_needs_overwrite() {
        let mut c = KvCache::new(2, 3, 2);
        c.insert(10, 0, Branch::Cond, pair(1.0, 6), false).unwrap();
        assert!(matches!(
            c.insert(10, 0, Branch::Cond, pair(2.0, 6), false),
            Err(FecError::DuplicateCapture { t: 10, layer: 0 })
        ));
        c.insert(10, 0, Branch::Uncond, pair(2.0, 6), false).unwrap();
        c.insert(10, 0, Branch::Cond, pair(3.0, 6), true).unwrap();
        assert_eq!(c.get(10, 0, Branch::Cond).unwrap().keys[0], 3.0);
        assert_eq!(c.len(), 1);
        assert!(c.insert(10, 2, Branch::Cond, pair(1.0, 6), false).is_err());
        assert!(c.insert(10, 1, Branch::Cond, pair(1.0, 5), false).is_err());
    }

    #[test]
    fn missing_entries_reported() {
        let mut c = KvCache::new(2, 1, 1);
        c.insert(5, 0, Branch::Cond, pair(0.0, 1), false).unwrap();
        assert!(matches!(c.get(5, 1, Branch::Cond), Err(FecError::MissingCacheEntry { t: 5, layer: 1 })));
        assert!(c.ensure_covers(&[5], Branch::Cond).is_err());
        assert!(c.ensure_covers(&[5], Branch::Uncond).is_err());
    }

    #[test]
    fn file_roundtrip_and_order() {
        let mut c = KvCache::new(2, 2, 3);
        for t in [20, 40, 60] {
            for l in 0..2 {
                c.insert(t, l, Branch::Cond, pair(t as f64 + l as f64, 6), false).unwrap();
                if t != 40 {
                    c.insert(t, l, Branch::Uncond, pair(-(t as f64), 6), false).unwrap();
                }
            }
        }
        let mut buf = Vec::new();
        c.write_to(&mut buf, FloatWidth::F64).unwrap();
        assert_eq!(&buf[..6], b"FECKV1");
        // First entry after the 31-byte header is t = 60, layer 0.
        assert_eq!(u32::from_le_bytes(buf[31..35].try_into().unwrap()), 60);
        assert_eq!(u32::from_le_bytes(buf[35..39].try_into().unwrap()), 0);
        let back = KvCache::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);

        let mut narrow = Vec::new();
        c.write_to(&mut narrow, FloatWidth::F32).unwrap();
        assert!(narrow.len() < buf.len());
        let back32 = KvCache::read_from(&mut narrow.as_slice()).unwrap();
        let k = &back32.get(60, 1, Branch::Cond).unwrap().keys;
        assert!((k[1] - 61.25).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"FECKV2\x01\x00\x00\x00".to_vec();
        assert!(matches!(KvCache::read_from(&mut bytes.as_slice()), Err(FecError::Format(_))));
    }
}
