//! Little-endian primitives shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{FecError, Result};

/// Storage width of floating-point payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatWidth {
    F32,
    #[default]
    F64,
}

impl FloatWidth {
    pub fn bits(self) -> u8 {
        match self {
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            32 => Ok(FloatWidth::F32),
            64 => Ok(FloatWidth::F64),
            other => Err(FecError::Format(format!("unsupported float width {other}"))),
        }
    }
}

pub(crate) fn write_magic(w: &mut impl Write, magic: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(FecError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub(crate) fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FecError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_floats(w: &mut impl Write, values: &[f64], width: FloatWidth) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    match width {
        FloatWidth::F32 => values.iter().for_each(|&v| buf.extend((v as f32).to_le_bytes())),
        FloatWidth::F64 => values.iter().for_each(|&v| buf.extend(v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_floats(r: &mut impl Read, n: usize, width: FloatWidth) -> Result<Vec<f64>> {
    match width {
        FloatWidth::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
        }
        FloatWidth::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
    }
}
