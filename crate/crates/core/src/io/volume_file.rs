//! "GPSV" volume files: header (magic, version u32, voxel size, truncation,
//! max weight as f32, block count u64), then per block the i32 block
//! coordinate and 512 voxels of (tsdf, weight, r, g, b) f32, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::IoError;
use crate::splat::file::{read_gpsf, write_gpsf};
use crate::splat::GaussianSet;
use crate::tsdf::{TsdfConfig, TsdfVolume, Voxel, VoxelBlock, BLOCK_VOXELS};

pub const VOLUME_MAGIC: &[u8; 4] = b"GPSV";
const VOLUME_VERSION: u32 = 1;

pub fn write_volume<W: Write>(vol: &TsdfVolume, mut w: W) -> std::io::Result<()> {
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes())?;
    for v in [vol.voxel_size(), vol.truncation(), vol.max_weight()] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(vol.block_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(12 + BLOCK_VOXELS * 20);
    for b in vol.blocks() {
        buf.clear();
        for c in b.coord.iter() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for v in b.voxels.iter() {
            for f in [v.tsdf, v.weight, v.color.x, v.color.y, v.color.z] {
                buf.extend_from_slice(&f.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn invalid(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

pub fn read_volume<R: Read>(mut r: R) -> std::io::Result<TsdfVolume> {
    let mut head = [0u8; 28];
    r.read_exact(&mut head)?;
    if &head[0..4] != VOLUME_MAGIC {
        return Err(invalid("not a GPSV file"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VOLUME_VERSION {
        return Err(invalid(format!("unsupported GPSV version {version}")));
    }
    let f = |i: usize| f32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
    let (voxel_size, truncation, max_weight) = (f(8), f(12), f(16));
    let count = u64::from_le_bytes(head[20..28].try_into().expect("8 bytes")) as usize;
    let mut blocks = Vec::with_capacity(count);
    let mut buf = vec![0u8; 12 + BLOCK_VOXELS * 20];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let word = |i: usize| -> [u8; 4] { buf[i..i + 4].try_into().expect("4 bytes") };
        let coord = Vector3::new(
            i32::from_le_bytes(word(0)),
            i32::from_le_bytes(word(4)),
            i32::from_le_bytes(word(8)),
        );
        let voxels = (0..BLOCK_VOXELS)
            .map(|k| {
                let o = 12 + 20 * k;
                let g = |j: usize| f32::from_le_bytes(word(o + 4 * j));
                Voxel {
                    tsdf: g(0),
                    weight: g(1),
                    color: Vector3::new(g(2), g(3), g(4)),
                }
            })
            .collect();
        blocks.push(VoxelBlock { coord, voxels });
    }
    let cfg = TsdfConfig {
        voxel_size,
        truncation: Some(truncation),
        max_weight,
        block_budget: count.max(TsdfConfig::default().block_budget),
    };
    TsdfVolume::from_blocks(cfg, blocks).map_err(|e| invalid(e.to_string()))
}

pub fn save_volume(vol: &TsdfVolume, path: &Path) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_volume(vol, BufWriter::new(f)).map_err(|e| IoError::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<TsdfVolume, IoError> {
    let f = File::open(path).map_err(|e| IoError::io(path, e))?;
    read_volume(BufReader::new(f)).map_err(|e| IoError::io(path, e))
}

pub fn save_gaussians<T: crate::Real>(set: &GaussianSet<T>, path: &Path) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_gpsf(set, BufWriter::new(f)).map_err(|e| IoError::format(path, e.to_string()))
}

/// Loads a GPSF file; an empty set gets `empty_degree`.
pub fn load_gaussians(path: &Path, empty_degree: usize) -> Result<GaussianSet<f32>, IoError> {
    let f = File::open(path).map_err(|e| IoError::io(path, e))?;
    read_gpsf(BufReader::new(f), empty_degree).map_err(|e| IoError::format(path, e.to_string()))
}
