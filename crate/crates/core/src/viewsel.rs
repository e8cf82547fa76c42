//! Frame/point overlap index and greedy view selection.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::geom::{unproject_all, KdTree, PointCloud, RgbdFrame};
use crate::Real;

pub const DEFAULT_COVER_THRESHOLD: f64 = 0.1;
pub const DEFAULT_COARSE_VOXEL: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameCoverage {
    pub frame_id: usize,
    /// Sorted positions into `coarse_ids`.
    pub covered: Vec<u32>,
}

/// Which coarse scene points each frame sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageIndex {
    pub coarse_voxel: f64,
    pub cover_threshold: f64,
    pub coarse_count: usize,
    /// Scene point index of each coarse point, ascending.
    pub coarse_ids: Vec<usize>,
    /// Sorted by frame id.
    pub frames: Vec<FrameCoverage>,
}

/// Lowest-index point of every occupied voxel, in ascending index order.
pub fn voxel_representatives<T: Real>(positions: &[[T; 3]], voxel: T) -> Vec<usize> {
    let mut first: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let key = [0, 1, 2].map(|d| (p[d] / voxel).floor().to_i64().unwrap_or(i64::MIN));
        first.entry(key).or_insert(i);
    }
    let mut ids: Vec<usize> = first.into_values().collect();
    ids.sort_unstable();
    ids
}

pub fn build_coverage_index<T: Real>(
    points: &PointCloud<T>,
    frames: &[RgbdFrame<T>],
    cover_threshold: T,
    coarse_voxel: T,
) -> Result<CoverageIndex> {
    if frames.is_empty() {
        bail!(Size, "coverage index needs at least one frame");
    }
    if !(cover_threshold > T::zero()) || !(coarse_voxel > T::zero()) {
        bail!(Validation, "coverage threshold and voxel size must be positive");
    }
    let coarse_ids = voxel_representatives(points.positions(), coarse_voxel);
    let coarse: Vec<[T; 3]> = coarse_ids.iter().map(|&i| points.positions()[i]).collect();
    let thr2 = cover_threshold * cover_threshold;
    let mut per_frame: Vec<FrameCoverage> = frames
        .par_iter()
        .map(|frame| {
            let lifted = unproject_all(frame);
            let covered = if lifted.positions.is_empty() {
                Vec::new()
            } else {
                let tree = KdTree::new(&lifted.positions);
                coarse
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| tree.nearest(q).map_or(false, |(_, d2)| d2 < thr2))
                    .map(|(j, _)| j as u32)
                    .collect()
            };
            FrameCoverage {
                frame_id: frame.frame_id,
                covered,
            }
        })
        .collect();
    per_frame.sort_by_key(|f| f.frame_id);
    if per_frame.windows(2).any(|w| w[0].frame_id == w[1].frame_id) {
        bail!(Validation, "duplicate frame ids");
    }
    Ok(CoverageIndex {
        coarse_voxel: coarse_voxel.as_f64(),
        cover_threshold: cover_threshold.as_f64(),
        coarse_count: coarse_ids.len(),
        coarse_ids,
        frames: per_frame,
    })
}

impl CoverageIndex {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_count != self.coarse_ids.len() {
            bail!(Validation, "coarse count does not match coarse ids");
        }
        for f in &self.frames {
            if f.covered.windows(2).any(|w| w[0] >= w[1]) {
                bail!(Validation, "frame {} covered set is not sorted and unique", f.frame_id);
            }
            if f.covered.last().map_or(false, |&j| j as usize >= self.coarse_count) {
                bail!(Validation, "frame {} covers an unknown coarse point", f.frame_id);
            }
        }
        Ok(())
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }

    /// Coarse points whose scene position lies in the half-open xy box `[lo, hi)`.
    pub fn targets_in_box<T: Real>(&self, points: &PointCloud<T>, lo: [T; 2], hi: [T; 2]) -> Vec<usize> {
        let pos = points.positions();
        (0..self.coarse_count)
            .filter(|&j| {
                let p = pos[self.coarse_ids[j]];
                p[0] >= lo[0] && p[0] < hi[0] && p[1] >= lo[1] && p[1] < hi[1]
            })
            .collect()
    }

    /// Fraction of `target` covered by the union of the given frames.
    pub fn union_coverage(&self, target: &[usize], frame_ids: &[usize]) -> f64 {
        if target.is_empty() {
            return 0.0;
        }
        let mut hit = vec![false; self.coarse_count];
        for f in self.frames.iter().filter(|f| frame_ids.contains(&f.frame_id)) {
            for &j in &f.covered {
                hit[j as usize] = true;
            }
        }
        target.iter().filter(|&&j| hit[j]).count() as f64 / target.len() as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: CoverageIndex =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        index.validate()?;
        Ok(index)
    }
}

/// Picks `m` distinct frames, each maximizing newly covered target points.
/// Ties go to the lowest frame id.
pub fn greedy_select(index: &CoverageIndex, target: &[usize], m: usize) -> Result<Vec<usize>> {
    if index.frames.is_empty() {
        bail!(Size, "no frames to select from");
    }
    if m == 0 {
        bail!(Validation, "view count must be at least 1");
    }
    if m > index.frames.len() {
        bail!(Size, "asked for {m} views from {} frames", index.frames.len());
    }
    let mut uncovered = vec![false; index.coarse_count];
    for &j in target {
        if j >= index.coarse_count {
            bail!(Validation, "target coarse index {j} out of range");
        }
        uncovered[j] = true;
    }
    let mut taken = vec![false; index.frames.len()];
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, usize)> = None;
        for (slot, f) in index.frames.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let gain = f.covered.iter().filter(|&&j| uncovered[j as usize]).count();
            if best.map_or(true, |(_, g)| gain > g) {
                best = Some((slot, gain));
            }
        }
        let (slot, _) = best.expect("m does not exceed frame count");
        taken[slot] = true;
        for &j in &index.frames[slot].covered {
            uncovered[j as usize] = false;
        }
        chosen.push(index.frames[slot].frame_id);
    }
    Ok(chosen)
}

/// Fraction of `sparse` points with a `dense` neighbor strictly closer than `threshold`.
pub fn coverage<T: Real>(sparse: &PointCloud<T>, dense: &PointCloud<T>, threshold: T) -> Result<f64> {
    if sparse.is_empty() {
        bail!(Size, "coverage of an empty cloud is undefined");
    }
    if dense.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::new(dense.positions());
    let thr2 = threshold * threshold;
    let hits = sparse
        .positions()
        .iter()
        .filter(|q| tree.nearest(q).map_or(false, |(_, d2)| d2 < thr2))
        .count();
    Ok(hits as f64 / sparse.len() as f64)
}
