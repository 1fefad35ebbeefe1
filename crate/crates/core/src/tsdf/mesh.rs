use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::tables::{CORNERS, EDGES, TRIANGLE_TABLE};
use super::{BlockCache, TsdfVolume, BLOCK_EDGE};

/// Indexed triangle mesh with per-vertex color.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f32>>,
    pub colors: Vec<Vector3<f32>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f32>; 3] {
        let f = self.faces[i];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    /// Unnormalized face normal (length = twice the area).
    pub fn face_normal(&self, i: usize) -> Vector3<f32> {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len())
            .map(|i| self.face_normal(i).norm() as f64 * 0.5)
            .sum()
    }
}

/// Edge identity shared by neighbouring cells: lower lattice corner + axis.
type EdgeKey = (Vector3<i32>, u8);

struct BlockPatch {
    /// Vertices created in this block, keyed by edge.
    verts: Vec<(EdgeKey, Vector3<f32>, Vector3<f32>)>,
    tris: Vec<[EdgeKey; 3]>,
}

impl TsdfVolume {
    /// Marching cubes over every fully observed voxel cell.
    ///
    /// Triangles wind counter-clockwise seen from the positive (free-space)
    /// side, so face normals point out of the surface.
    pub fn extract_mesh(&self) -> TriangleMesh {
        let patches: Vec<BlockPatch> = self
            .blocks()
            .par_iter()
            .map(|block| self.march_block(block.coord))
            .collect();

        let mut mesh = TriangleMesh::default();
        let mut index: HashMap<EdgeKey, u32> = HashMap::new();
        for patch in patches {
            for (key, pos, color) in patch.verts {
                index.entry(key).or_insert_with(|| {
                    mesh.vertices.push(pos);
                    mesh.colors.push(color);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            for tri in patch.tris {
                let f = [index[&tri[0]], index[&tri[1]], index[&tri[2]]];
                if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                    mesh.faces.push(f);
                }
            }
        }
        mesh
    }

    fn march_block(&self, coord: Vector3<i32>) -> BlockPatch {
        let mut cache = BlockCache::default();
        let mut patch = BlockPatch {
            verts: Vec::new(),
            tris: Vec::new(),
        };
        let base = coord * BLOCK_EDGE;
        let mut seen: HashMap<EdgeKey, ()> = HashMap::new();
        for z in 0..BLOCK_EDGE {
            for y in 0..BLOCK_EDGE {
                for x in 0..BLOCK_EDGE {
                    let cell = base + Vector3::new(x, y, z);
                    let mut vals = [0.0f32; 8];
                    let mut cols = [Vector3::zeros(); 8];
                    let mut complete = true;
                    for (k, off) in CORNERS.iter().enumerate() {
                        let c = cell + Vector3::new(off[0], off[1], off[2]);
                        match self.voxel_cached(&c, &mut cache) {
                            Some(v) if v.weight > 0.0 => {
                                vals[k] = v.tsdf;
                                cols[k] = v.color;
                            }
                            _ => {
                                complete = false;
                                break;
                            }
                        }
                    }
                    if !complete {
                        continue;
                    }
                    let mut case = 0usize;
                    for (k, v) in vals.iter().enumerate() {
                        if *v < 0.0 {
                            case |= 1 << k;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let mut edge_keys = [None; 12];
                    let row = &TRIANGLE_TABLE[case];
                    for e in row.iter().take_while(|&&e| e >= 0) {
                        let e = *e as usize;
                        if edge_keys[e].is_some() {
                            continue;
                        }
                        let [a, b] = EDGES[e];
                        let (oa, ob) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&i| oa[i] != ob[i]).unwrap_or(0);
                        let lower = if oa[axis] < ob[axis] { oa } else { ob };
                        let key = (cell + Vector3::new(lower[0], lower[1], lower[2]), axis as u8);
                        edge_keys[e] = Some(key);
                        if seen.insert(key, ()).is_none() {
                            let (fa, fb) = (vals[a], vals[b]);
                            let t = if (fa - fb).abs() > 1e-12 { fa / (fa - fb) } else { 0.5 };
                            let pa = (cell + Vector3::new(oa[0], oa[1], oa[2])).cast::<f32>();
                            let pb = (cell + Vector3::new(ob[0], ob[1], ob[2])).cast::<f32>();
                            let pos = (pa + (pb - pa) * t) * self.voxel_size;
                            let color = self
                                .sample_cached(&pos, &mut cache)
                                .map(|s| s.color)
                                .unwrap_or_else(|| cols[a] + (cols[b] - cols[a]) * t);
                            patch.verts.push((key, pos, color));
                        }
                    }
                    for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                        let k = |e: i8| edge_keys[e as usize].expect("edge on triangle");
                        // The table winds triangles facing the negative side.
                        patch.tris.push([k(tri[0]), k(tri[2]), k(tri[1])]);
                    }
                }
            }
        }
        patch
    }
}
