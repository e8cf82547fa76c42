use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geom::{FeatureMatrix, KdTree};
use crate::nn::{Mode, Tape};
use crate::scene::Scene;
use crate::Real;

use super::chunk::{chunk_members, forward_chunks, prepare_chunk, resample, ChunkSpec};
use super::{derive_seed, FusionModel};

/// Sliding-window inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Window step in meters.
    pub stride: f64,
    pub chunk_size: f64,
    pub chunk_points: usize,
    pub views_m: usize,
    pub n_rgb: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            stride: 0.5,
            chunk_size: 1.5,
            chunk_points: 2048,
            views_m: 3,
            n_rgb: 512,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride > 0.0 && self.chunk_size > 0.0) {
            bail!(Validation, "stride and chunk size must be positive");
        }
        if self.chunk_points == 0 || self.views_m == 0 || self.n_rgb == 0 {
            bail!(Validation, "chunk points, views and pixels per view must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    /// One label per scene point.
    pub labels: Vec<u16>,
    /// How many window predictions each point received.
    pub counts: Vec<u32>,
}

/// Window origins along one axis: `lo + i·stride` while the window fits, plus one
/// final window flush with `hi` when the regular grid stops short of it.
pub fn grid_origins(lo: f64, hi: f64, size: f64, stride: f64) -> Vec<f64> {
    let span = hi - lo - size;
    if span <= 0.0 {
        return vec![lo];
    }
    let steps = (span / stride).floor() as usize;
    let mut out: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * stride).collect();
    if *out.last().expect("non-empty") < lo + span {
        out.push(lo + span);
    }
    out
}

/// Hard-label majority vote. Returns the winning class per point (ties to the
/// lowest id, `None` without votes) and the per-point vote totals.
pub fn tally_votes(points: usize, classes: usize, votes: &[(usize, u16)]) -> (Vec<Option<u16>>, Vec<u32>) {
    let mut table = vec![0u32; points * classes];
    for &(i, c) in votes {
        table[i * classes + c as usize] += 1;
    }
    let mut labels = Vec::with_capacity(points);
    let mut counts = Vec::with_capacity(points);
    for row in table.chunks_exact(classes.max(1)) {
        let total: u32 = row.iter().sum();
        counts.push(total);
        if total == 0 {
            labels.push(None);
            continue;
        }
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.push(Some(best as u16));
    }
    (labels, counts)
}

/// Every window's members split into padded groups of `chunk_points`.
/// Window origins covering the xy bounds of `positions`, row by row.
pub fn window_origins(positions: &[[f64; 3]], chunk_size: f64, stride: f64) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in positions {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if positions.is_empty() {
        return Vec::new();
    }
    // widen so the far boundary points fall inside the last half-open window
    let pad = 1e-6;
    let xs = grid_origins(lo[0], hi[0] + pad, chunk_size, stride);
    let ys = grid_origins(lo[1], hi[1] + pad, chunk_size, stride);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
}

pub(crate) fn plan_windows(scene_positions: &[[f64; 3]], cfg: &InferConfig) -> Vec<(usize, ChunkSpec, Vec<usize>)> {
    let mut out = Vec::new();
    let mut window = 0;
    for origin in window_origins(scene_positions, cfg.chunk_size, cfg.stride) {
        let members = chunk_members(scene_positions, origin, cfg.chunk_size);
        window += 1;
        if members.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[window as u64]));
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let groups = members.len().div_ceil(cfg.chunk_points);
        let base = members.len() / groups;
        let extra = members.len() % groups;
        let mut start = 0;
        for g in 0..groups {
            let len = base + usize::from(g < extra);
            let own = order[start..start + len].to_vec();
            start += len;
            let sampled = resample(&own, cfg.chunk_points, &mut rng).expect("group is non-empty");
            let spec = ChunkSpec {
                origin_xy: origin,
                size: cfg.chunk_size,
                members: members.clone(),
                sampled,
            };
            out.push((window * 1024 + g, spec, own));
        }
    }
    out
}

/// Views chosen for one inference window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowViews {
    pub origin: [f64; 2],
    /// Coarse coverage targets inside the window.
    pub targets: usize,
    /// Greedy order.
    pub frame_ids: Vec<usize>,
    /// Union coverage of the targets after each pick.
    pub coverage: Vec<f64>,
}

/// Greedy view selection for every non-empty window of the inference grid.
pub fn window_views<T: Real>(scene: &Scene<T>, cfg: &InferConfig) -> Result<Vec<WindowViews>> {
    cfg.validate()?;
    let pos: Vec<[f64; 3]> = scene.cloud.positions().iter().map(|p| p.map(|v| v.as_f64())).collect();
    let mut out = Vec::new();
    for origin in window_origins(&pos, cfg.chunk_size, cfg.stride) {
        let lo = [T::lit(origin[0]), T::lit(origin[1])];
        let hi = [T::lit(origin[0] + cfg.chunk_size), T::lit(origin[1] + cfg.chunk_size)];
        let target = scene.coverage.targets_in_box(&scene.cloud, lo, hi);
        if target.is_empty() {
            continue;
        }
        let frame_ids = crate::viewsel::greedy_select(&scene.coverage, &target, cfg.views_m)?;
        let coverage = (1..=frame_ids.len())
            .map(|k| scene.coverage.union_coverage(&target, &frame_ids[..k]))
            .collect();
        out.push(WindowViews {
            origin,
            targets: target.len(),
            frame_ids,
            coverage,
        });
    }
    Ok(out)
}

/// Sliding-window prediction with majority voting over overlapping windows.
/// Every member of a window is predicted once per window; points that no window
/// reached take the label of the nearest predicted point.
pub fn infer_scene<T: Real>(
    model: &FusionModel<T>,
    scene: &Scene<T>,
    cache: Option<&[FeatureMatrix<T>]>,
    cfg: &InferConfig,
) -> Result<InferResult> {
    cfg.validate()?;
    let n = scene.cloud.len();
    if n == 0 {
        bail!(Size, "scene {} has no points", scene.name);
    }
    let classes = model.config.backbone.num_classes;
    let pos64: Vec<[f64; 3]> = scene
        .cloud
        .positions()
        .iter()
        .map(|p| [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()])
        .collect();
    let groups = plan_windows(&pos64, cfg);
    let votes: Vec<Vec<(usize, u16)>> = groups
        .into_par_iter()
        .map(|(key, spec, own)| predict_group(model, scene, cache, cfg, key, spec, &own))
        .collect::<Result<_>>()?;
    let flat: Vec<(usize, u16)> = votes.into_iter().flatten().collect();
    let (voted, counts) = tally_votes(n, classes, &flat);
    let labels = fill_unvoted(&pos64, &voted)?;
    Ok(InferResult { labels, counts })
}

/// Argmax class of every point in `own`, predicted from one padded chunk.
pub(crate) fn predict_group<T: Real>(
    model: &FusionModel<T>,
    scene: &Scene<T>,
    cache: Option<&[FeatureMatrix<T>]>,
    cfg: &InferConfig,
    key: usize,
    spec: ChunkSpec,
    own: &[usize],
) -> Result<Vec<(usize, u16)>> {
    let classes = model.config.backbone.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[key as u64, 1]));
    let sampled = spec.sampled.clone();
    let chunk = prepare_chunk(model, scene, spec, 0.0, cfg.views_m, cfg.n_rgb, cache, &mut rng)?;
    let mut tape = Tape::new();
    let logits = forward_chunks(model, &mut tape, std::slice::from_ref(&chunk), Mode::Eval)?;
    let vals = tape.value(logits);
    if vals.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite logits in scene {}", scene.name);
    }
    let mut pending: std::collections::HashSet<usize> = own.iter().copied().collect();
    let mut out = Vec::with_capacity(own.len());
    for (row, &i) in sampled.iter().enumerate() {
        // padding repeats a point; keep its first prediction only
        if !pending.remove(&i) {
            continue;
        }
        let r = &vals[row * classes..(row + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if r[c] > r[best] {
                best = c;
            }
        }
        out.push((i, best as u16));
    }
    Ok(out)
}

/// Labels of unvoted points copied from the nearest voted point.
pub(crate) fn fill_unvoted(positions: &[[f64; 3]], voted: &[Option<u16>]) -> Result<Vec<u16>> {
    let have: Vec<usize> = (0..voted.len()).filter(|&i| voted[i].is_some()).collect();
    if have.len() == voted.len() {
        return Ok(voted.iter().map(|v| v.expect("all voted")).collect());
    }
    if have.is_empty() {
        bail!(State, "no point received a prediction");
    }
    let pts: Vec<[f64; 3]> = have.iter().map(|&i| positions[i]).collect();
    let tree = KdTree::new(&pts);
    Ok(voted
        .iter()
        .zip(positions)
        .map(|(v, p)| match v {
            Some(l) => *l,
            None => voted[have[tree.nearest(p).expect("non-empty tree").0]].expect("voted"),
        })
        .collect())
}
