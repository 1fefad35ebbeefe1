//! "GPSF" Gaussian set files: a 16-byte header (magic, version u32, count
//! u64) followed by little-endian f32 records in parameter-buffer order.

use std::io::{Read, Write};

use thiserror::Error;

use super::{GaussianSet, MAX_SH_DEGREE, SH};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"GPSF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GpsfError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a GPSF file")]
    BadMagic,
    #[error("unsupported GPSF version {0}")]
    BadVersion(u32),
    #[error("payload of {bytes} bytes does not hold {count} records of any SH degree")]
    BadSize { bytes: usize, count: u64 },
}

pub fn write_gpsf<T: Real, W: Write>(set: &GaussianSet<T>, mut w: W) -> Result<(), GpsfError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(set.params().len() * 4);
    for v in set.params() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads a set; the SH degree follows from the record size. An empty file
/// gets `empty_degree`.
pub fn read_gpsf<R: Read>(mut r: R, empty_degree: usize) -> Result<GaussianSet<f32>, GpsfError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(GpsfError::BadMagic);
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(GpsfError::BadVersion(version));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let bytes = payload.len();
    if count == 0 {
        if bytes != 0 {
            return Err(GpsfError::BadSize { bytes, count });
        }
        return Ok(GaussianSet::new(empty_degree));
    }
    let bad = GpsfError::BadSize { bytes, count };
    if bytes % 4 != 0 || (bytes / 4) as u64 % count != 0 {
        return Err(bad);
    }
    let stride = ((bytes / 4) as u64 / count) as usize;
    let degree = (0..=MAX_SH_DEGREE).find(|&d| SH + 3 * (d + 1) * (d + 1) == stride).ok_or(bad)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(GaussianSet::from_params(degree, data).expect("size checked"))
}
