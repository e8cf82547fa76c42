//! Procedural rooms rendered by exact ray casting.
//!
//! Every scene is a floor, four wall slabs and a handful of boxes, spheres and
//! vertical cylinders. The two cylinder classes share one shape distribution
//! and differ only in color, so geometry alone cannot tell them apart.

mod raycast;

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use raycast::{Hit, Primitive};

use crate::error::{bail, Error, Result};
use crate::geom::{CameraIntrinsics, PointCloud, Pose, RgbdFrame, IGNORE_LABEL};
use crate::scene::Scene;

pub const FLOOR: u16 = 0;
pub const WALL: u16 = 1;
pub const BOX: u16 = 2;
pub const SPHERE: u16 = 3;
pub const TWIN_A: u16 = 4;
pub const TWIN_B: u16 = 5;
pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["floor", "wall", "box", "sphere", "twin_a", "twin_b"];

const WALL_THICKNESS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub frames_per_scene: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Room side lengths are drawn uniformly from this range.
    pub room_size: (f64, f64),
    pub wall_height: f64,
    pub boxes: (usize, usize),
    pub spheres: (usize, usize),
    /// Count range for each of the two cylinder classes.
    pub twins: (usize, usize),
    /// Surface samples per square meter.
    pub point_density: f64,
    /// Std-dev of per-pixel and per-point color noise.
    pub color_noise: f64,
    /// Half-width of the per-object uniform color offset.
    pub color_jitter: f64,
    pub base_colors: [[f64; 3]; NUM_CLASSES],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_scenes: 32,
            val_scenes: 8,
            frames_per_scene: 20,
            width: 40,
            height: 32,
            focal: 30.0,
            room_size: (3.0, 4.0),
            wall_height: 1.6,
            boxes: (2, 3),
            spheres: (1, 2),
            twins: (1, 2),
            point_density: 150.0,
            color_noise: 0.04,
            color_jitter: 0.05,
            base_colors: [
                [0.55, 0.45, 0.35],
                [0.80, 0.80, 0.75],
                [0.70, 0.68, 0.62],
                [0.30, 0.60, 0.30],
                [0.80, 0.25, 0.20],
                [0.20, 0.35, 0.80],
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.boxes, self.spheres, self.twins];
        if self.frames_per_scene == 0 || self.width == 0 || self.height == 0 {
            bail!(Validation, "frame count and image size must be positive");
        }
        if !(self.focal > 0.0) || !(self.point_density > 0.0) || !(self.wall_height > 0.0) {
            bail!(Validation, "focal length, point density and wall height must be positive");
        }
        if !(self.room_size.0 >= 2.0 && self.room_size.1 >= self.room_size.0) {
            bail!(Validation, "room size range must satisfy 2 <= min <= max");
        }
        if ranges.iter().any(|r| r.0 > r.1) {
            bail!(Validation, "object count ranges must satisfy min <= max");
        }
        if !(self.color_noise >= 0.0) || !(self.color_jitter >= 0.0) {
            bail!(Validation, "color noise and jitter must be non-negative");
        }
        if self.base_colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            bail!(Validation, "base colors must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics<f64>> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width / 2) as f64,
            (self.height / 2) as f64,
            self.width,
            self.height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub primitive: Primitive,
    pub class_id: u16,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

/// Fully resolved scene description; rendering it is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    /// Interior extent along x and y, and wall height.
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<CameraPlacement>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub point_density: f64,
    pub color_noise: f64,
    /// Unit direction towards the light.
    pub light: [f64; 3],
}

fn jitter_color<R: Rng>(base: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-1.0..=1.0) * amount).clamp(0.0, 1.0))
}

impl SceneSpec {
    /// Draws a random room from the corpus settings.
    pub fn sample(config: &SynthConfig, name: String, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = config.room_size;
        let w = rng.random_range(lo..=hi);
        let d = rng.random_range(lo..=hi);
        let h = config.wall_height;
        let t = WALL_THICKNESS;
        let mut objects = Vec::new();
        let structure = |prim: Primitive, class: u16, rng: &mut ChaCha8Rng| SceneObject {
            primitive: prim,
            class_id: class,
            color: jitter_color(config.base_colors[class as usize], config.color_jitter, rng),
        };
        objects.push(structure(
            Primitive::Aabb {
                min: [0.0, 0.0, -t],
                max: [w, d, 0.0],
            },
            FLOOR,
            &mut rng,
        ));
        for (min, max) in [
            ([-t, -t, 0.0], [0.0, d + t, h]),
            ([w, -t, 0.0], [w + t, d + t, h]),
            ([0.0, -t, 0.0], [w, 0.0, h]),
            ([0.0, d, 0.0], [w, d + t, h]),
        ] {
            objects.push(structure(Primitive::Aabb { min, max }, WALL, &mut rng));
        }

        let mut wanted: Vec<u16> = Vec::new();
        for (class, range) in [
            (BOX, config.boxes),
            (SPHERE, config.spheres),
            (TWIN_A, config.twins),
            (TWIN_B, config.twins),
        ] {
            let n = rng.random_range(range.0..=range.1);
            wanted.extend(std::iter::repeat(class).take(n));
        }
        let mut placed: Vec<([f64; 2], f64)> = Vec::new();
        for class in wanted {
            for _attempt in 0..200 {
                let (prim, center, radius) = match class {
                    BOX => {
                        let sx: f64 = rng.random_range(0.3..0.8);
                        let sy: f64 = rng.random_range(0.3..0.8);
                        let sz = rng.random_range(0.3..0.9);
                        let cx = rng.random_range(0.0..1.0);
                        let cy = rng.random_range(0.0..1.0);
                        let r = (sx * sx + sy * sy).sqrt() / 2.0;
                        let c = [r + 0.2 + cx * (w - 2.0 * r - 0.4), r + 0.2 + cy * (d - 2.0 * r - 0.4)];
                        (
                            Primitive::Aabb {
                                min: [c[0] - sx / 2.0, c[1] - sy / 2.0, 0.0],
                                max: [c[0] + sx / 2.0, c[1] + sy / 2.0, sz],
                            },
                            c,
                            r,
                        )
                    }
                    SPHERE => {
                        let r = rng.random_range(0.2..0.35);
                        let c = [rng.random_range(r + 0.2..w - r - 0.2), rng.random_range(r + 0.2..d - r - 0.2)];
                        (
                            Primitive::Sphere {
                                center: [c[0], c[1], r],
                                radius: r,
                            },
                            c,
                            r,
                        )
                    }
                    _ => {
                        let r = rng.random_range(0.15..0.3);
                        let z1 = rng.random_range(0.5..1.0);
                        let c = [rng.random_range(r + 0.2..w - r - 0.2), rng.random_range(r + 0.2..d - r - 0.2)];
                        (
                            Primitive::Cylinder {
                                center: c,
                                radius: r,
                                z0: 0.0,
                                z1,
                            },
                            c,
                            r,
                        )
                    }
                };
                let clear = placed.iter().all(|(pc, pr)| {
                    let dx = pc[0] - center[0];
                    let dy = pc[1] - center[1];
                    (dx * dx + dy * dy).sqrt() > pr + radius + 0.15
                });
                if clear {
                    placed.push((center, radius));
                    objects.push(structure(prim, class, &mut rng));
                    break;
                }
            }
        }

        let center = [w / 2.0, d / 2.0];
        let n = config.frames_per_scene;
        let cameras = (0..n)
            .map(|i| {
                let theta = 2.0 * PI * i as f64 / n as f64 + rng.random_range(-0.2..0.2);
                let r = rng.random_range(0.3..0.42) * w.min(d);
                let eye = [
                    center[0] + r * theta.cos(),
                    center[1] + r * theta.sin(),
                    rng.random_range(1.3..1.7),
                ];
                // aim past the room center so the far walls stay in view
                let reach = rng.random_range(0.2..0.6);
                let target = [
                    center[0] - reach * r * theta.cos() + rng.random_range(-0.4..0.4),
                    center[1] - reach * r * theta.sin() + rng.random_range(-0.4..0.4),
                    rng.random_range(0.3..0.8),
                ];
                CameraPlacement { eye, target }
            })
            .collect();
        let light = unit([0.4, 0.3, 1.0]);
        let spec = SceneSpec {
            name,
            seed,
            room: [w, d, h],
            objects,
            cameras,
            intrinsics: config.intrinsics()?,
            point_density: config.point_density,
            color_noise: config.color_noise,
            light,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|v| !(*v > 0.0)) {
            bail!(Validation, "room extents must be positive");
        }
        if self.cameras.is_empty() {
            bail!(Validation, "scene needs at least one camera");
        }
        if !(self.point_density > 0.0) || !(self.color_noise >= 0.0) {
            bail!(Validation, "invalid point density or color noise");
        }
        self.intrinsics.validate()?;
        let t = WALL_THICKNESS + 1e-9;
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id as usize >= NUM_CLASSES {
                bail!(Validation, "object {i} has unknown class {}", o.class_id);
            }
            let (lo, hi) = bounds(&o.primitive);
            let inside = (0..3).all(|k| lo[k] >= -t && hi[k] <= self.room[k] + t) && lo.iter().chain(&hi).all(|v| v.is_finite());
            if !inside {
                bail!(Validation, "object {i} lies outside the room");
            }
        }
        Ok(())
    }

    pub fn pose(&self, i: usize) -> Result<Pose<f64>> {
        let c = &self.cameras[i];
        Pose::look_at(c.eye, c.target, [0.0, 0.0, 1.0])
    }
}

fn bounds(p: &Primitive) -> ([f64; 3], [f64; 3]) {
    match *p {
        Primitive::Aabb { min, max } => (min, max),
        Primitive::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
        Primitive::Cylinder { center, radius, z0, z1 } => (
            [center[0] - radius, center[1] - radius, z0],
            [center[0] + radius, center[1] + radius, z1],
        ),
    }
}

/// Closest hit over all objects; ties go to the lower object index.
pub fn cast_ray(objects: &[SceneObject], origin: [f64; 3], dir: [f64; 3]) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some(h) = o.primitive.intersect(origin, dir) {
            if best.map_or(true, |(_, b)| h.t < b.t) {
                best = Some((i, h));
            }
        }
    }
    best
}

fn shade<R: Rng>(base: [f64; 3], normal: [f64; 3], light: [f64; 3], noise: f64, rng: &mut R) -> [f64; 3] {
    let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).abs();
    let s = 0.5 + 0.5 * lambert;
    base.map(|c| {
        let n: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
        (c * s + noise * n).clamp(0.0, 1.0)
    })
}

/// Rendered frame in double precision plus its per-pixel class ids.
pub fn render_frame(spec: &SceneSpec, camera: usize, rng: &mut impl Rng) -> Result<(RgbdFrame<f64>, Vec<u16>)> {
    let pose = spec.pose(camera)?;
    let k = &spec.intrinsics;
    let n = k.pixel_count();
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut labels = vec![IGNORE_LABEL; n];
    for v in 0..k.height {
        for u in 0..k.width {
            let ray_cam = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
            let r = &pose.rotation;
            let dir = [0, 1, 2].map(|i| r[i][0] * ray_cam[0] + r[i][1] * ray_cam[1] + r[i][2] * ray_cam[2]);
            let p = v * k.width + u;
            if let Some((obj, hit)) = cast_ray(&spec.objects, pose.translation, dir) {
                // the camera-frame ray has unit z, so the hit parameter is the depth
                depth[p] = hit.t;
                labels[p] = spec.objects[obj].class_id;
                let c = shade(spec.objects[obj].color, hit.normal, spec.light, spec.color_noise, rng);
                for ch in 0..3 {
                    rgb[3 * p + ch] = crate::scene::quantize_unit(c[ch]) as f64 / 255.0;
                }
            }
        }
    }
    Ok((RgbdFrame::new(rgb, depth, *k, pose, camera)?, labels))
}

/// A sampleable piece of exposed surface.
enum Patch {
    Rect { origin: [f64; 3], u: [f64; 3], v: [f64; 3], normal: [f64; 3] },
    SphereShell { center: [f64; 3], radius: f64 },
    CylinderSide { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
    Disk { center: [f64; 3], radius: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Rect { u, v, .. } => norm(u) * norm(v),
            Patch::SphereShell { radius, .. } => 4.0 * PI * radius * radius,
            Patch::CylinderSide { radius, z0, z1, .. } => 2.0 * PI * radius * (z1 - z0),
            Patch::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> ([f64; 3], [f64; 3]) {
        match *self {
            Patch::Rect { origin, u, v, normal } => {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                ([0, 1, 2].map(|i| origin[i] + a * u[i] + b * v[i]), normal)
            }
            Patch::SphereShell { center, radius } => {
                let g = Normal::new(0.0, 1.0).expect("unit normal");
                let n = loop {
                    let d = [g.sample(rng), g.sample(rng), g.sample(rng)];
                    if norm(d) > 1e-12 {
                        break unit(d);
                    }
                };
                ([0, 1, 2].map(|i| center[i] + radius * n[i]), n)
            }
            Patch::CylinderSide { center, radius, z0, z1 } => {
                let th = rng.random_range(0.0..2.0 * PI);
                let z = rng.random_range(z0..z1);
                (
                    [center[0] + radius * th.cos(), center[1] + radius * th.sin(), z],
                    [th.cos(), th.sin(), 0.0],
                )
            }
            Patch::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                ([center[0] + r * th.cos(), center[1] + r * th.sin(), center[2]], [0.0, 0.0, 1.0])
            }
        }
    }
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    a.map(|x| x / n)
}

/// Surfaces of an object that can face the room interior.
fn exposed_patches(o: &SceneObject, room: [f64; 3]) -> Vec<Patch> {
    let [w, d, h] = room;
    match (o.class_id, &o.primitive) {
        (FLOOR, _) => vec![Patch::Rect {
            origin: [0.0; 3],
            u: [w, 0.0, 0.0],
            v: [0.0, d, 0.0],
            normal: [0.0, 0.0, 1.0],
        }],
        (WALL, Primitive::Aabb { min, max }) => {
            // the inner face is the one touching the interior rectangle
            let (origin, u, v, normal) = if max[0] <= 0.0 {
                ([0.0, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], [1.0, 0.0, 0.0])
            } else if min[0] >= w {
                ([w, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], [-1.0, 0.0, 0.0])
            } else if max[1] <= 0.0 {
                ([0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], [0.0, 1.0, 0.0])
            } else {
                ([0.0, d, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], [0.0, -1.0, 0.0])
            };
            vec![Patch::Rect { origin, u, v, normal }]
        }
        (_, Primitive::Aabb { min, max }) => {
            let s = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
            vec![
                Patch::Rect { origin: *min, u: [0.0, s[1], 0.0], v: [0.0, 0.0, s[2]], normal: [-1.0, 0.0, 0.0] },
                Patch::Rect { origin: [max[0], min[1], min[2]], u: [0.0, s[1], 0.0], v: [0.0, 0.0, s[2]], normal: [1.0, 0.0, 0.0] },
                Patch::Rect { origin: *min, u: [s[0], 0.0, 0.0], v: [0.0, 0.0, s[2]], normal: [0.0, -1.0, 0.0] },
                Patch::Rect { origin: [min[0], max[1], min[2]], u: [s[0], 0.0, 0.0], v: [0.0, 0.0, s[2]], normal: [0.0, 1.0, 0.0] },
                Patch::Rect { origin: [min[0], min[1], max[2]], u: [s[0], 0.0, 0.0], v: [0.0, s[1], 0.0], normal: [0.0, 0.0, 1.0] },
            ]
        }
        (_, Primitive::Sphere { center, radius }) => vec![Patch::SphereShell {
            center: *center,
            radius: *radius,
        }],
        (_, Primitive::Cylinder { center, radius, z0, z1 }) => vec![
            Patch::CylinderSide { center: *center, radius: *radius, z0: *z0, z1: *z1 },
            Patch::Disk { center: [center[0], center[1], *z1], radius: *radius },
        ],
    }
}

/// Surface samples with labels and shaded colors.
pub fn sample_surface(spec: &SceneSpec, rng: &mut impl Rng) -> Result<(PointCloud<f64>, Vec<[f64; 3]>)> {
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut colors = Vec::new();
    for (oi, o) in spec.objects.iter().enumerate() {
        for patch in exposed_patches(o, spec.room) {
            let count = (patch.area() * spec.point_density).round() as usize;
            for _ in 0..count {
                let (p, n) = patch.sample(rng);
                // drop samples buried in or touching another solid
                let buried = spec
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(j, other)| j != oi && other.primitive.sdf(p) <= 0.0);
                if buried {
                    continue;
                }
                positions.push(p);
                labels.push(o.class_id);
                colors.push(shade(o.color, n, spec.light, spec.color_noise, rng));
            }
        }
    }
    let cloud = PointCloud::new(positions)?.with_labels(labels)?;
    Ok((cloud, colors))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let (cloud, colors) = sample_surface(spec, &mut rng)?;
    if cloud.is_empty() {
        bail!(Validation, "scene {} has no surface samples", spec.name);
    }
    let mut frames = Vec::with_capacity(spec.cameras.len());
    let mut labels2d = Vec::with_capacity(spec.cameras.len());
    for i in 0..spec.cameras.len() {
        let mut frng = ChaCha8Rng::seed_from_u64(spec.seed);
        frng.set_stream(2 + i as u64);
        let (f, l) = render_frame(spec, i, &mut frng)?;
        frames.push(f);
        labels2d.push(l);
    }
    Scene::new(spec.name.clone(), cloud, colors, frames, labels2d)
}

/// Seed of the `index`-th scene of a corpus.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ 0x94D0_49BB_1331_11EB
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub config: SynthConfig,
}

/// In-memory corpus: `(train, val)` scenes.
pub fn generate_corpus(config: &SynthConfig) -> Result<(Vec<Scene<f64>>, Vec<Scene<f64>>)> {
    config.validate()?;
    let total = config.train_scenes + config.val_scenes;
    let scenes = (0..total)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec::sample(config, format!("scene_{i:04}"), scene_seed(config.seed, i))?;
            generate_scene(&spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train = scenes;
    let val = train.split_off(config.train_scenes);
    Ok((train, val))
}

/// Writes `train/<scene>`, `val/<scene>` and `corpus.json` under `out`.
pub fn write_corpus(config: &SynthConfig, out: &Path) -> Result<CorpusManifest> {
    let (train, val) = generate_corpus(config)?;
    for (split, scenes) in [("train", &train), ("val", &val)] {
        for s in scenes {
            s.write_dir(&out.join(split).join(&s.name))?;
        }
    }
    let manifest = CorpusManifest {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        train: train.iter().map(|s| s.name.clone()).collect(),
        val: val.iter().map(|s| s.name.clone()).collect(),
        config: config.clone(),
    };
    let path = out.join("corpus.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
