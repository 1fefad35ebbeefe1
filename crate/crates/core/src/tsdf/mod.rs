//! Voxel-block-hashed truncated signed distance volume.
//!
//! Voxel `i` (integer lattice coordinate) sits at world position
//! `i * voxel_size`. Voxels are stored in 8³ blocks addressed through an
//! open-addressing spatial hash on the block coordinate. Distances are
//! normalized by the truncation distance, so `|tsdf| <= 1`.

pub(crate) mod mesh;
mod raycast;
pub(crate) mod tables;

pub use mesh::TriangleMesh;
pub use raycast::SdfRender;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Frame, Pose};

pub const BLOCK_EDGE: i32 = 8;
pub const BLOCK_VOXELS: usize = 512;

const EMPTY_SLOT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsdfError {
    #[error("voxel block budget of {budget} blocks exhausted")]
    BlockBudgetExceeded { budget: usize },
    #[error("invalid volume configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    pub tsdf: f32,
    pub weight: f32,
    pub color: Vector3<f32>,
}

impl Default for Voxel {
    fn default() -> Self {
        Self {
            tsdf: 1.0,
            weight: 0.0,
            color: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VoxelBlock {
    pub coord: Vector3<i32>,
    pub voxels: Box<[Voxel]>,
}

impl VoxelBlock {
    fn new(coord: Vector3<i32>) -> Self {
        Self {
            coord,
            voxels: vec![Voxel::default(); BLOCK_VOXELS].into_boxed_slice(),
        }
    }

    #[inline]
    pub fn local_index(x: i32, y: i32, z: i32) -> usize {
        (x + BLOCK_EDGE * (y + BLOCK_EDGE * z)) as usize
    }

    /// Lattice coordinate of the voxel at local offset.
    #[inline]
    pub fn voxel_coord(&self, x: i32, y: i32, z: i32) -> Vector3<i32> {
        self.coord * BLOCK_EDGE + Vector3::new(x, y, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdfConfig {
    /// Voxel edge length in meters.
    pub voxel_size: f32,
    /// Truncation distance μ in meters; defaults to four voxels.
    pub truncation: Option<f32>,
    pub max_weight: f32,
    pub block_budget: usize,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.005,
            truncation: None,
            max_weight: 100.0,
            block_budget: 100_000,
        }
    }
}

impl TsdfConfig {
    pub fn truncation(&self) -> f32 {
        self.truncation.unwrap_or(4.0 * self.voxel_size)
    }
}

#[inline]
fn block_hash(c: &Vector3<i32>) -> u32 {
    let h = (c.x as u32 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (c.y as u32 as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (c.z as u32 as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    (h ^ (h >> 29) ^ (h >> 47)) as u32
}

#[inline]
pub fn block_of(voxel: &Vector3<i32>) -> Vector3<i32> {
    voxel.map(|v| v.div_euclid(BLOCK_EDGE))
}

/// `v.floor() as i32` without the libm call on targets lacking SSE4.1.
#[inline]
pub(crate) fn floor_i32(v: f32) -> i32 {
    let i = v as i32;
    i - ((i as f32) > v) as i32
}

#[inline]
fn local_of(voxel: &Vector3<i32>) -> usize {
    let l = voxel.map(|v| v.rem_euclid(BLOCK_EDGE));
    VoxelBlock::local_index(l.x, l.y, l.z)
}

/// Trilinearly interpolated volume sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdfSample {
    pub tsdf: f32,
    pub color: Vector3<f32>,
}

#[derive(Clone, Debug)]
pub struct TsdfVolume {
    voxel_size: f32,
    truncation: f32,
    max_weight: f32,
    budget: usize,
    slots: Vec<u32>,
    blocks: Vec<VoxelBlock>,
}

impl TsdfVolume {
    pub fn new(config: TsdfConfig) -> Result<Self, TsdfError> {
        let bad = |m: &str| Err(TsdfError::InvalidConfig(m.into()));
        if !(config.voxel_size > 0.0) {
            return bad("voxel_size must be positive");
        }
        if !(config.truncation() > 0.0) {
            return bad("truncation must be positive");
        }
        if !(config.max_weight >= 1.0) {
            return bad("max_weight must be at least 1");
        }
        if config.block_budget == 0 {
            return bad("block_budget must be positive");
        }
        let capacity = (config.block_budget * 2).next_power_of_two();
        Ok(Self {
            voxel_size: config.voxel_size,
            truncation: config.truncation(),
            max_weight: config.max_weight,
            budget: config.block_budget,
            slots: vec![EMPTY_SLOT; capacity],
            blocks: Vec::new(),
        })
    }

    /// Rebuilds a volume from stored blocks (used by the on-disk format).
    pub fn from_blocks(config: TsdfConfig, blocks: Vec<VoxelBlock>) -> Result<Self, TsdfError> {
        let mut vol = Self::new(config)?;
        if blocks.len() > vol.budget {
            return Err(TsdfError::BlockBudgetExceeded { budget: vol.budget });
        }
        for b in blocks {
            let (idx, fresh) = vol.find_or_insert(b.coord)?;
            if !fresh {
                return Err(TsdfError::InvalidConfig(format!(
                    "duplicate block {:?}",
                    b.coord
                )));
            }
            vol.blocks[idx] = b;
        }
        Ok(vol)
    }

    pub fn config(&self) -> TsdfConfig {
        TsdfConfig {
            voxel_size: self.voxel_size,
            truncation: Some(self.truncation),
            max_weight: self.max_weight,
            block_budget: self.budget,
        }
    }

    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn max_weight(&self) -> f32 {
        self.max_weight
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[VoxelBlock] {
        &self.blocks
    }

    fn find(&self, coord: &Vector3<i32>) -> Option<usize> {
        let mask = self.slots.len() - 1;
        let mut slot = block_hash(coord) as usize & mask;
        loop {
            let idx = self.slots[slot];
            if idx == EMPTY_SLOT {
                return None;
            }
            if self.blocks[idx as usize].coord == *coord {
                return Some(idx as usize);
            }
            slot = (slot + 1) & mask;
        }
    }

    fn find_or_insert(&mut self, coord: Vector3<i32>) -> Result<(usize, bool), TsdfError> {
        let mask = self.slots.len() - 1;
        let mut slot = block_hash(&coord) as usize & mask;
        loop {
            let idx = self.slots[slot];
            if idx == EMPTY_SLOT {
                if self.blocks.len() >= self.budget {
                    return Err(TsdfError::BlockBudgetExceeded {
                        budget: self.budget,
                    });
                }
                let new = self.blocks.len();
                self.blocks.push(VoxelBlock::new(coord));
                self.slots[slot] = new as u32;
                return Ok((new, true));
            }
            if self.blocks[idx as usize].coord == coord {
                return Ok((idx as usize, false));
            }
            slot = (slot + 1) & mask;
        }
    }

    /// Allocates a single block; returns whether it was new.
    pub fn allocate_block(&mut self, coord: Vector3<i32>) -> Result<bool, TsdfError> {
        self.find_or_insert(coord).map(|(_, fresh)| fresh)
    }

    pub fn block(&self, coord: &Vector3<i32>) -> Option<&VoxelBlock> {
        self.find(coord).map(|i| &self.blocks[i])
    }

    /// Voxel at a lattice coordinate; `None` if its block is not allocated.
    pub fn voxel(&self, coord: &Vector3<i32>) -> Option<&Voxel> {
        self.find(&block_of(coord))
            .map(|i| &self.blocks[i].voxels[local_of(coord)])
    }

    pub fn voxel_mut(&mut self, coord: &Vector3<i32>) -> Option<&mut Voxel> {
        self.find(&block_of(coord))
            .map(|i| &mut self.blocks[i].voxels[local_of(coord)])
    }

    pub fn voxel_position(&self, coord: &Vector3<i32>) -> Vector3<f32> {
        coord.cast::<f32>() * self.voxel_size
    }

    /// Allocates every block crossed by the `[d - μ, d + μ]` depth band of each
    /// valid pixel. Returns the number of newly allocated blocks.
    pub fn allocate(&mut self, frame: &Frame, pose: &Pose<f64>) -> Result<usize, TsdfError> {
        let k = &frame.intrinsics;
        let mu = self.truncation as f64;
        let block_size = self.voxel_size as f64 * BLOCK_EDGE as f64;
        let mut new_blocks = 0usize;
        let mut cells = Vec::with_capacity(16);
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                let d = frame.depth.at(x, y) as f64;
                if d <= 0.0 {
                    continue;
                }
                let near = pose.transform_point(&k.unproject(x as f64, y as f64, (d - mu).max(0.0)));
                let far = pose.transform_point(&k.unproject(x as f64, y as f64, d + mu));
                cells.clear();
                traverse_cells(&near, &far, block_size, &mut cells);
                for c in &cells {
                    let (_, fresh) = self.find_or_insert(*c)?;
                    new_blocks += fresh as usize;
                }
            }
        }
        Ok(new_blocks)
    }

    /// Running-average fusion of one frame into all blocks it can see.
    pub fn integrate(&mut self, frame: &Frame, pose: &Pose<f64>) {
        let world_to_cam = pose.inverse().cast::<f32>();
        let k = frame.intrinsics.cast::<f32>();
        let (w, h) = (frame.width() as i64, frame.height() as i64);
        let vs = self.voxel_size;
        let mu = self.truncation;
        let w_max = self.max_weight;
        let extent = BLOCK_EDGE as f32 * vs;
        self.blocks.par_iter_mut().for_each(|block| {
            let origin = block.coord.cast::<f32>() * extent;
            if !block_visible(&origin, extent, &world_to_cam, &k) {
                return;
            }
            for z in 0..BLOCK_EDGE {
                for y in 0..BLOCK_EDGE {
                    for x in 0..BLOCK_EDGE {
                        let p = origin + Vector3::new(x as f32, y as f32, z as f32) * vs;
                        let pc = world_to_cam.transform_point(&p);
                        if pc.z <= 0.0 {
                            continue;
                        }
                        let u = floor_i32(k.fx * pc.x / pc.z + k.cx + 0.5) as i64;
                        let v = floor_i32(k.fy * pc.y / pc.z + k.cy + 0.5) as i64;
                        if u < 0 || v < 0 || u >= w || v >= h {
                            continue;
                        }
                        let d = frame.depth.at(u as usize, v as usize);
                        if d <= 0.0 {
                            continue;
                        }
                        let diff = d - pc.z;
                        if diff < -mu {
                            continue;
                        }
                        let sample = (diff / mu).clamp(-1.0, 1.0);
                        let rgb = frame.rgb.at(u as usize, v as usize);
                        let vox = &mut block.voxels[VoxelBlock::local_index(x, y, z)];
                        let n = vox.weight + 1.0;
                        vox.tsdf += (sample - vox.tsdf) / n;
                        vox.color += (rgb - vox.color) / n;
                        vox.weight = n.min(w_max);
                    }
                }
            }
        });
    }

    /// Trilinear blend of the eight voxels around `p`; `None` if any of them is
    /// unallocated or unobserved.
    pub fn sample_trilinear(&self, p: &Vector3<f32>) -> Option<TsdfSample> {
        let mut cache = BlockCache::default();
        self.sample_cached(p, &mut cache)
    }

    pub(crate) fn sample_cached(&self, p: &Vector3<f32>, cache: &mut BlockCache) -> Option<TsdfSample> {
        let g = p / self.voxel_size;
        let base = g.map(floor_i32);
        let f = g - base.cast::<f32>();
        // All eight corners usually share a block: one lookup serves them all.
        let local = base.map(|v| v.rem_euclid(BLOCK_EDGE));
        let block = if local.iter().all(|l| *l < BLOCK_EDGE - 1) {
            let b = block_of(&base);
            if !self.block_allocated(&b, cache) {
                return None;
            }
            Some(&self.blocks[cache.last.expect("cached by block_allocated").1])
        } else {
            None
        };
        let mut tsdf = 0.0f32;
        let mut color = Vector3::zeros();
        for off in tables::CORNERS.iter() {
            let vox = match block {
                Some(b) => &b.voxels[VoxelBlock::local_index(local.x + off[0], local.y + off[1], local.z + off[2])],
                None => self.voxel_cached(&(base + Vector3::new(off[0], off[1], off[2])), cache)?,
            };
            if vox.weight <= 0.0 {
                return None;
            }
            let wx = if off[0] == 1 { f.x } else { 1.0 - f.x };
            let wy = if off[1] == 1 { f.y } else { 1.0 - f.y };
            let wz = if off[2] == 1 { f.z } else { 1.0 - f.z };
            let wgt = wx * wy * wz;
            tsdf += wgt * vox.tsdf;
            color += vox.color * wgt;
        }
        Some(TsdfSample { tsdf, color })
    }

    #[inline]
    fn lookup(&self, coord: &Vector3<i32>, cache: &BlockCache) -> Option<usize> {
        match cache.dense {
            Some(d) => d.get(coord),
            None => self.find(coord),
        }
    }

    /// Dense index over the allocated region, if it is small enough.
    pub(crate) fn dense_index(&self) -> Option<DenseIndex> {
        const MAX_CELLS: i64 = 1 << 24;
        let mut lo = Vector3::repeat(i32::MAX);
        let mut hi = Vector3::repeat(i32::MIN);
        for b in &self.blocks {
            lo = lo.inf(&b.coord);
            hi = hi.sup(&b.coord);
        }
        if self.blocks.is_empty() {
            return None;
        }
        let dims = hi - lo + Vector3::repeat(1);
        if dims.iter().map(|d| *d as i64).product::<i64>() > MAX_CELLS {
            return None;
        }
        let mut idx = vec![EMPTY_SLOT; (dims.x * dims.y * dims.z) as usize];
        let super_lo = lo.map(|v| v.div_euclid(SUPER_BLOCK));
        let super_dims = hi.map(|v| v.div_euclid(SUPER_BLOCK)) - super_lo + Vector3::repeat(1);
        let mut occupied = vec![false; (super_dims.x * super_dims.y * super_dims.z) as usize];
        for (i, b) in self.blocks.iter().enumerate() {
            let r = b.coord - lo;
            idx[(r.x + dims.x * (r.y + dims.y * r.z)) as usize] = i as u32;
            let q = b.coord.map(|v| v.div_euclid(SUPER_BLOCK)) - super_lo;
            occupied[(q.x + super_dims.x * (q.y + super_dims.y * q.z)) as usize] = true;
        }
        Some(DenseIndex {
            lo,
            dims,
            idx,
            super_lo,
            super_dims,
            occupied,
        })
    }

    #[inline]
    pub(crate) fn voxel_cached(&self, c: &Vector3<i32>, cache: &mut BlockCache) -> Option<&Voxel> {
        let b = block_of(c);
        let idx = match cache.last {
            Some((coord, idx)) if coord == b => idx,
            _ => {
                let idx = self.lookup(&b, cache)?;
                cache.last = Some((b, idx));
                idx
            }
        };
        Some(&self.blocks[idx].voxels[local_of(c)])
    }

    #[inline]
    pub(crate) fn block_allocated(&self, coord: &Vector3<i32>, cache: &mut BlockCache) -> bool {
        match cache.last {
            Some((c, _)) if c == *coord => true,
            _ => match self.lookup(coord, cache) {
                Some(idx) => {
                    cache.last = Some((*coord, idx));
                    true
                }
                None => false,
            },
        }
    }
}

/// Remembers the last block hit so neighbouring lookups skip the hash, and
/// optionally looks blocks up in a dense table instead of the hash.
#[derive(Default, Clone, Copy)]
pub(crate) struct BlockCache<'a> {
    last: Option<(Vector3<i32>, usize)>,
    pub(crate) dense: Option<&'a DenseIndex>,
}

impl<'a> BlockCache<'a> {
    pub(crate) fn with_dense(dense: Option<&'a DenseIndex>) -> Self {
        Self { last: None, dense }
    }
}

/// Edge of the coarse occupancy cells, in blocks.
pub(crate) const SUPER_BLOCK: i32 = 4;

/// Block indices over the bounding box of the allocated blocks, plus a
/// coarse occupancy grid for empty-space skipping.
pub(crate) struct DenseIndex {
    lo: Vector3<i32>,
    dims: Vector3<i32>,
    idx: Vec<u32>,
    super_lo: Vector3<i32>,
    super_dims: Vector3<i32>,
    occupied: Vec<bool>,
}

impl DenseIndex {
    /// Whether any block in the coarse cell holding `block` is allocated.
    #[inline]
    pub(crate) fn region_occupied(&self, block: &Vector3<i32>) -> bool {
        let r = block.map(|v| v.div_euclid(SUPER_BLOCK)) - self.super_lo;
        let d = self.super_dims;
        if r.x < 0 || r.y < 0 || r.z < 0 || r.x >= d.x || r.y >= d.y || r.z >= d.z {
            return false;
        }
        self.occupied[(r.x + d.x * (r.y + d.y * r.z)) as usize]
    }

    #[inline]
    fn get(&self, c: &Vector3<i32>) -> Option<usize> {
        let r = c - self.lo;
        if r.x < 0 || r.y < 0 || r.z < 0 || r.x >= self.dims.x || r.y >= self.dims.y || r.z >= self.dims.z {
            return None;
        }
        let i = self.idx[(r.x + self.dims.x * (r.y + self.dims.y * r.z)) as usize];
        (i != EMPTY_SLOT).then_some(i as usize)
    }

    /// World-space box around all allocated blocks.
    pub(crate) fn bounds(&self, voxel_size: f32) -> [Vector3<f32>; 2] {
        let e = voxel_size * BLOCK_EDGE as f32;
        [self.lo.cast::<f32>() * e, (self.lo + self.dims).cast::<f32>() * e]
    }
}

fn block_visible(
    origin: &Vector3<f32>,
    extent: f32,
    world_to_cam: &Pose<f32>,
    k: &crate::geometry::Intrinsics<f32>,
) -> bool {
    let (mut umin, mut vmin, mut umax, mut vmax) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    let mut any_front = false;
    for off in tables::CORNERS.iter() {
        let p = origin + Vector3::new(off[0] as f32, off[1] as f32, off[2] as f32) * extent;
        let pc = world_to_cam.transform_point(&p);
        if pc.z <= 1e-3 {
            // A corner behind the camera makes the projected bound unbounded.
            return true;
        }
        any_front = true;
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    any_front
        && umax >= -0.5
        && vmax >= -0.5
        && umin <= k.width as f32 - 0.5
        && vmin <= k.height as f32 - 0.5
}

/// Cells of a regular grid (edge `cell`) crossed by the segment `a`→`b`
/// (3D DDA).
pub(crate) fn traverse_cells(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    cell: f64,
    out: &mut Vec<Vector3<i32>>,
) {
    let ga = a / cell;
    let gb = b / cell;
    let mut c = ga.map(|v| v.floor() as i32);
    let end = gb.map(|v| v.floor() as i32);
    let d = gb - ga;
    let mut step = Vector3::zeros();
    let mut t_max = Vector3::repeat(f64::INFINITY);
    let mut t_delta = Vector3::repeat(f64::INFINITY);
    for i in 0..3 {
        if d[i] > 0.0 {
            step[i] = 1;
            t_max[i] = (c[i] as f64 + 1.0 - ga[i]) / d[i];
            t_delta[i] = 1.0 / d[i];
        } else if d[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (ga[i] - c[i] as f64) / -d[i];
            t_delta[i] = -1.0 / d[i];
        }
    }
    let budget = (end - c).abs().sum() as usize + 3;
    out.push(c);
    for _ in 0..budget {
        if c == end {
            break;
        }
        let axis = if t_max.x <= t_max.y && t_max.x <= t_max.z {
            0
        } else if t_max.y <= t_max.z {
            1
        } else {
            2
        };
        if t_max[axis] > 1.0 {
            break;
        }
        c[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        out.push(c);
    }
}
