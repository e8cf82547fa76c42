use rand::seq::index::sample;
use rand::Rng;

use crate::error::{bail, Result};
use crate::geom::{rotation_z, FeatureMatrix, Neighbors, Pose, RgbdFrame, IGNORE_LABEL};
use crate::lift::{sample_dense, DenseSamples};
use crate::net2d::hwc_to_chw;
use crate::nn::{Mode, ParamStore, Tape, Var};
use crate::pointnet2::{ChunkPlan, Fusion, PointInputs};
use crate::scene::Scene;
use crate::viewsel::greedy_select;
use crate::Real;

use super::FusionModel;

/// A square xy column of a scene and the points drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSpec {
    pub origin_xy: [f64; 2],
    pub size: f64,
    /// Scene indices inside `[origin, origin + size)` on both axes.
    pub members: Vec<usize>,
    /// Exactly `chunk_points` scene indices, all from `members`.
    pub sampled: Vec<usize>,
}

impl ChunkSpec {
    pub fn center(&self) -> [f64; 2] {
        [self.origin_xy[0] + 0.5 * self.size, self.origin_xy[1] + 0.5 * self.size]
    }
}

/// Indices of points whose xy lies in the half-open square at `origin`.
pub fn chunk_members<T: Real>(positions: &[[T; 3]], origin: [f64; 2], size: f64) -> Vec<usize> {
    let (x1, y1) = (origin[0] + size, origin[1] + size);
    positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (x, y) = (p[0].as_f64(), p[1].as_f64());
            x >= origin[0] && x < x1 && y >= origin[1] && y < y1
        })
        .map(|(i, _)| i)
        .collect()
}

/// `n` draws from `members`: without replacement when there are enough, otherwise
/// every member once plus uniform draws with replacement.
pub fn resample<R: Rng + ?Sized>(members: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if members.is_empty() {
        bail!(Size, "cannot sample from an empty chunk");
    }
    if members.len() >= n {
        let mut pick: Vec<usize> = sample(rng, members.len(), n).into_iter().map(|i| members[i]).collect();
        pick.sort_unstable();
        return Ok(pick);
    }
    let mut out = members.to_vec();
    while out.len() < n {
        out.push(members[rng.random_range(0..members.len())]);
    }
    Ok(out)
}

/// Picks a training chunk around a random scene point. Up to 100 centers are tried
/// until the annotated fraction reaches `min_annotated`; otherwise the best one is kept.
pub fn sample_train_chunk<T: Real, R: Rng + ?Sized>(
    scene: &Scene<T>,
    size: f64,
    points: usize,
    min_annotated: f64,
    rng: &mut R,
) -> Result<ChunkSpec> {
    let pos = scene.cloud.positions();
    if pos.is_empty() {
        bail!(Size, "scene {} is empty", scene.name);
    }
    let labels = scene.labels();
    let mut best: Option<(f64, [f64; 2], Vec<usize>)> = None;
    for _ in 0..100 {
        let p = pos[rng.random_range(0..pos.len())];
        let origin = [p[0].as_f64() - 0.5 * size, p[1].as_f64() - 0.5 * size];
        let members = chunk_members(pos, origin, size);
        let annotated = members.iter().filter(|&&i| labels[i] != IGNORE_LABEL).count();
        let frac = annotated as f64 / members.len().max(1) as f64;
        if best.as_ref().map_or(true, |b| frac > b.0) {
            best = Some((frac, origin, members));
        }
        if frac >= min_annotated {
            break;
        }
    }
    let (frac, origin_xy, members) = best.expect("at least one try");
    if frac == 0.0 {
        bail!(Validation, "scene {} has no annotated chunk", scene.name);
    }
    let sampled = resample(&members, points, rng)?;
    Ok(ChunkSpec {
        origin_xy,
        size,
        members,
        sampled,
    })
}

/// Image side of a prepared chunk.
#[derive(Clone, Debug)]
pub struct LiftInputs<T> {
    /// Selected frame ids, greedy order.
    pub frame_ids: Vec<usize>,
    /// Dense positions in chunk coordinates and their `(view, pixel)` sources.
    pub dense: DenseSamples<T>,
    /// `k` nearest dense points of every sampled point.
    pub neighbors: Neighbors<T>,
    /// Per dense point features from a frozen cache, `[dense, c]`.
    pub cached: Option<Vec<T>>,
    /// Planar images `[views, 3, h, w]` for a live 2D network.
    pub images: Option<Vec<T>>,
}

/// Everything the networks need for one chunk.
#[derive(Clone, Debug)]
pub struct PreparedChunk<T> {
    pub spec: ChunkSpec,
    /// Sampled points after centering and rotation.
    pub positions: Vec<[T; 3]>,
    pub labels: Vec<u16>,
    /// Per point color rows, `[n, 3]`.
    pub colors: Vec<T>,
    pub plan: ChunkPlan<T>,
    pub lift: Option<LiftInputs<T>>,
}

/// Moves world coordinates into the chunk frame: subtract the chunk center (xy)
/// and floor height (z), then rotate about the vertical axis.
fn to_chunk<T: Real>(rz: &[[T; 3]; 3], center: [T; 3], p: [T; 3]) -> [T; 3] {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    [
        rz[0][0] * d[0] + rz[0][1] * d[1] + rz[0][2] * d[2],
        rz[1][0] * d[0] + rz[1][1] * d[1] + rz[1][2] * d[2],
        rz[2][0] * d[0] + rz[2][1] * d[1] + rz[2][2] * d[2],
    ]
}

fn frame_to_chunk<T: Real>(frame: &RgbdFrame<T>, rz: &[[T; 3]; 3], center: [T; 3]) -> Result<RgbdFrame<T>> {
    let r = &frame.pose.rotation;
    let mut rot = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = (0..3).map(|k| rz[i][k] * r[k][j]).sum();
        }
    }
    Ok(RgbdFrame {
        pose: Pose::new(rot, to_chunk(rz, center, frame.pose.translation))?,
        ..frame.clone()
    })
}

/// Lowest point of the scene, used as the common floor height.
pub(crate) fn floor_height<T: Real>(scene: &Scene<T>) -> T {
    scene
        .cloud
        .positions()
        .iter()
        .map(|p| p[2])
        .fold(T::infinity(), T::min)
}

/// Normalizes a chunk, selects and rotates its views, and samples the dense cloud.
/// `cache` holds per-frame feature maps of a frozen 2D network (indexed by scene slot);
/// without it the selected images are kept for a live forward pass.
#[allow(clippy::too_many_arguments)]
pub fn prepare_chunk<T: Real, R: Rng + ?Sized>(
    model: &FusionModel<T>,
    scene: &Scene<T>,
    spec: ChunkSpec,
    angle: f64,
    views: usize,
    n_rgb: usize,
    cache: Option<&[FeatureMatrix<T>]>,
    rng: &mut R,
) -> Result<PreparedChunk<T>> {
    let c = spec.center();
    let center = [T::lit(c[0]), T::lit(c[1]), floor_height(scene)];
    let rz = rotation_z(T::lit(angle));
    let pos = scene.cloud.positions();
    let labels = scene.labels();
    let positions: Vec<[T; 3]> = spec.sampled.iter().map(|&i| to_chunk(&rz, center, pos[i])).collect();
    let plan = model.backbone.plan(&positions)?;
    let lift = match &model.lift {
        None => None,
        Some(agg) => {
            let half = T::lit(0.5 * spec.size);
            let lo = [center[0] - half, center[1] - half];
            let hi = [center[0] + half, center[1] + half];
            let target = scene.coverage.targets_in_box(&scene.cloud, lo, hi);
            let frame_ids = greedy_select(&scene.coverage, &target, views)?;
            let slots: Vec<usize> = frame_ids
                .iter()
                .map(|&id| scene.frame_slot(id).expect("coverage ids name scene frames"))
                .collect();
            let frames = slots
                .iter()
                .map(|&s| frame_to_chunk(&scene.frames[s], &rz, center))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&RgbdFrame<T>> = frames.iter().collect();
            let dense = sample_dense(&refs, n_rgb, rng)?;
            let neighbors = agg.neighbors(&positions, &dense.positions)?;
            let (cached, images) = match cache {
                Some(maps) => {
                    let ch = maps.first().map_or(0, |m| m.channels());
                    let mut data = Vec::with_capacity(dense.sources.len() * ch);
                    for &(v, p) in &dense.sources {
                        data.extend_from_slice(maps[slots[v]].row(p));
                    }
                    (Some(data), None)
                }
                None => {
                    let mut img = Vec::new();
                    for f in &frames {
                        img.extend(hwc_to_chw(&f.rgb, f.width(), f.height(), false)?);
                    }
                    (None, Some(img))
                }
            };
            Some(LiftInputs {
                frame_ids,
                dense,
                neighbors,
                cached,
                images,
            })
        }
    };
    let colors = spec
        .sampled
        .iter()
        .flat_map(|&i| scene.colors[i])
        .collect();
    Ok(PreparedChunk {
        labels: spec.sampled.iter().map(|&i| labels[i]).collect(),
        spec,
        positions,
        colors,
        plan,
        lift,
    })
}

/// Logits `[Σ points, classes]` for a batch of prepared chunks of equal size.
pub fn forward_chunks<T: Real>(
    model: &FusionModel<T>,
    tape: &mut Tape<T>,
    chunks: &[PreparedChunk<T>],
    mode: Mode,
) -> Result<Var> {
    forward_with_store(model, &model.store, tape, chunks, mode)
}

/// [`forward_chunks`] with parameters taken from `store` instead of the model's own.
pub fn forward_with_store<T: Real>(
    model: &FusionModel<T>,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    chunks: &[PreparedChunk<T>],
    mode: Mode,
) -> Result<Var> {
    if chunks.is_empty() {
        bail!(Size, "empty chunk batch");
    }
    let lifted = match (&model.net2d, &model.lift) {
        (Some(net), Some(agg)) => {
            let inputs: Vec<&LiftInputs<T>> = chunks
                .iter()
                .map(|c| c.lift.as_ref())
                .collect::<Option<_>>()
                .ok_or_else(|| crate::Error::Validation("chunk lacks image inputs".into()))?;
            let feat_dim = net.config().feature_dim;
            let features = if inputs.iter().all(|l| l.cached.is_some()) {
                let data: Vec<T> = inputs.iter().flat_map(|l| l.cached.as_ref().expect("checked").iter().copied()).collect();
                let rows = data.len() / feat_dim;
                tape.constant(vec![rows, feat_dim], data)?
            } else {
                let (w, h) = net.config().input_size;
                let hw = w * h;
                let views = inputs[0].frame_ids.len();
                if inputs.iter().any(|l| l.images.is_none() || l.frame_ids.len() != views) {
                    bail!(Validation, "live 2D features need images with a fixed view count");
                }
                let img: Vec<T> = inputs.iter().flat_map(|l| l.images.as_ref().expect("checked").iter().copied()).collect();
                let x = tape.constant(vec![inputs.len() * views, 3, h, w], img)?;
                let (f, _) = net.forward(tape, store, x, mode)?;
                let rows = tape.nchw_to_rows(f)?;
                let mut idx = Vec::new();
                for (b, l) in inputs.iter().enumerate() {
                    idx.extend(l.dense.sources.iter().map(|&(v, p)| (b * views + v) * hw + p));
                }
                tape.gather_rows(rows, idx)?
            };
            let k = agg.config().k;
            let mut sparse = Vec::new();
            let mut dense = Vec::new();
            let mut indices = Vec::new();
            let mut sq = Vec::new();
            for (c, l) in chunks.iter().zip(&inputs) {
                let off = dense.len();
                sparse.extend_from_slice(&c.positions);
                dense.extend_from_slice(&l.dense.positions);
                indices.extend(l.neighbors.indices.iter().map(|i| i + off));
                sq.extend_from_slice(&l.neighbors.sq_distances);
            }
            let nb = Neighbors {
                k,
                indices,
                sq_distances: sq,
            };
            Some(agg.forward(tape, store, &sparse, &dense, features, &nb)?)
        }
        _ => None,
    };
    let rgb: Option<Vec<T>> =
        (model.fusion() == Fusion::XyzRgb).then(|| chunks.iter().flat_map(|c| c.colors.iter().copied()).collect());
    let plans: Vec<ChunkPlan<T>> = chunks.iter().map(|c| c.plan.clone()).collect();
    model.backbone.forward(
        tape,
        store,
        &plans,
        PointInputs {
            rgb: rgb.as_deref(),
            lifted,
        },
        mode,
    )
}
