//! TUM RGB-D layout: `rgb.txt` and `depth.txt` index files of
//! `timestamp path` lines, 16-bit depth PNGs, optional `groundtruth.txt` and
//! an optional `intrinsics.txt` holding `fx fy cx cy`.

use std::fs;
use std::path::{Path, PathBuf};

use super::export::{read_depth, read_rgb, read_trajectory};
use super::IoError;
use crate::geometry::{Frame, Intrinsics, Pose};

/// Maximum timestamp gap for pairing color with depth (and frames with
/// ground truth).
pub const MAX_PAIR_GAP: f64 = 0.02;
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;
/// Freiburg default camera.
pub const DEFAULT_INTRINSICS: [f64; 4] = [525.0, 525.0, 319.5, 239.5];

#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TumSequence {
    pub root: PathBuf,
    pub associations: Vec<Association>,
    pub ground_truth: Option<Vec<(f64, Pose<f64>)>>,
    pub depth_scale: f64,
    /// Focal lengths and principal point; image size comes from the files.
    pub camera: [f64; 4],
    pub unmatched_rgb: usize,
    pub unmatched_depth: usize,
}

fn read_index(path: &Path) -> Result<Vec<(f64, PathBuf)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(p)) = (it.next(), it.next()) else {
            return Err(IoError::format(path, format!("line {}: expected `timestamp path`", i + 1)));
        };
        let t: f64 = t
            .parse()
            .map_err(|_| IoError::format(path, format!("line {}: bad timestamp `{t}`", i + 1)))?;
        out.push((t, PathBuf::from(p)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Index of the entry nearest to `t` in a time-sorted list.
fn nearest(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let i = times.partition_point(|&x| x < t);
    let mut best = i.min(times.len() - 1);
    if i > 0 && (t - times[i - 1]).abs() <= (times[best] - t).abs() {
        best = i - 1;
    }
    Some(best)
}

/// Pairs each color entry with the nearest unused depth entry within
/// [`MAX_PAIR_GAP`]. Returns the pairs and the unmatched counts.
pub fn associate(rgb: &[(f64, PathBuf)], depth: &[(f64, PathBuf)]) -> (Vec<Association>, usize, usize) {
    let times: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let mut used = vec![false; depth.len()];
    let mut out = Vec::new();
    for (t, path) in rgb {
        match nearest(&times, *t) {
            Some(j) if !used[j] && (times[j] - t).abs() <= MAX_PAIR_GAP => {
                used[j] = true;
                out.push(Association {
                    timestamp: *t,
                    rgb: path.clone(),
                    depth: depth[j].1.clone(),
                });
            }
            _ => {}
        }
    }
    let (m, nd) = (out.len(), used.iter().filter(|u| !**u).count());
    (out, rgb.len() - m, nd)
}

impl TumSequence {
    pub fn open(root: &Path) -> Result<Self, IoError> {
        let rgb = read_index(&root.join("rgb.txt"))?;
        let depth = read_index(&root.join("depth.txt"))?;
        let (associations, unmatched_rgb, unmatched_depth) = associate(&rgb, &depth);
        let gt_path = root.join("groundtruth.txt");
        let ground_truth = if gt_path.exists() {
            let mut gt = read_trajectory(&gt_path)?;
            gt.sort_by(|a, b| a.0.total_cmp(&b.0));
            Some(gt)
        } else {
            None
        };
        let k_path = root.join("intrinsics.txt");
        let camera = if k_path.exists() {
            let text = fs::read_to_string(&k_path).map_err(|e| IoError::io(&k_path, e))?;
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| IoError::format(&k_path, "expected four numbers: fx fy cx cy"))?;
            <[f64; 4]>::try_from(vals).map_err(|_| IoError::format(&k_path, "expected four numbers: fx fy cx cy"))?
        } else {
            DEFAULT_INTRINSICS
        };
        Ok(Self {
            root: root.to_path_buf(),
            associations,
            ground_truth,
            depth_scale: DEFAULT_DEPTH_SCALE,
            camera,
            unmatched_rgb,
            unmatched_depth,
        })
    }

    pub fn len(&self) -> usize {
        self.associations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.associations.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.associations.iter().map(|a| a.timestamp).collect()
    }

    /// Ground-truth pose nearest each frame, if every frame has one within
    /// [`MAX_PAIR_GAP`].
    pub fn ground_truth_for_frames(&self) -> Option<Vec<Pose<f64>>> {
        let gt = self.ground_truth.as_ref()?;
        let times: Vec<f64> = gt.iter().map(|g| g.0).collect();
        self.associations
            .iter()
            .map(|a| {
                let j = nearest(&times, a.timestamp)?;
                ((times[j] - a.timestamp).abs() <= MAX_PAIR_GAP).then_some(gt[j].1)
            })
            .collect()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame, IoError> {
        let a = &self.associations[index];
        let rgb_path = self.root.join(&a.rgb);
        let depth_path = self.root.join(&a.depth);
        let rgb = read_rgb(&rgb_path)?;
        let depth = read_depth(&depth_path, self.depth_scale)?;
        let [fx, fy, cx, cy] = self.camera;
        let k = Intrinsics::new(fx, fy, cx, cy, rgb.width(), rgb.height(), self.depth_scale)
            .map_err(|e| IoError::format(&rgb_path, e.to_string()))?;
        Frame::new(rgb, depth, k, index, a.timestamp).map_err(|e| IoError::format(&depth_path, e.to_string()))
    }

    /// Frames in time order, decoded lazily.
    pub fn frames(&self) -> impl Iterator<Item = Result<Frame, IoError>> + '_ {
        (0..self.len()).map(|i| self.load_frame(i))
    }
}

pub fn load_tum(root: &Path) -> Result<TumSequence, IoError> {
    TumSequence::open(root)
}

/// Writes a sequence in TUM layout with ground truth and intrinsics.
pub fn write_tum(
    root: &Path,
    frames: &[Frame],
    poses: &[Pose<f64>],
    depth_scale: f64,
) -> Result<(), IoError> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| IoError::io(p, e));
    mk(&root.join("rgb"))?;
    mk(&root.join("depth"))?;
    let mut rgb_idx = String::from("# color images\n# timestamp filename\n");
    let mut depth_idx = String::from("# depth maps\n# timestamp filename\n");
    for f in frames {
        let name = format!("{:.6}.png", f.timestamp);
        super::export::export_image(&f.rgb, &root.join("rgb").join(&name))?;
        super::export::export_depth(&f.depth, depth_scale, &root.join("depth").join(&name))?;
        rgb_idx.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_idx.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
    }
    let w = |name: &str, s: &str| {
        let p = root.join(name);
        fs::write(&p, s).map_err(|e| IoError::io(&p, e))
    };
    w("rgb.txt", &rgb_idx)?;
    w("depth.txt", &depth_idx)?;
    if let Some(f) = frames.first() {
        let k = f.intrinsics;
        w("intrinsics.txt", &format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy))?;
    }
    let ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    super::export::export_trajectory(poses, &ts, &root.join("groundtruth.txt"))
}
