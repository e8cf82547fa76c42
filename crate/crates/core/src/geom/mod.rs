//! Point clouds, pinhole cameras and the depth (un)projection between them.

mod kdtree;
mod sampling;

pub use kdtree::{knn, KdTree, Neighbors};
pub use sampling::{ball_query, farthest_point_sampling};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::Real;

/// Label value for points or pixels that carry no annotation.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// Row-major `rows × channels` matrix of per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn new(channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            if !data.is_empty() {
                bail!(Shape, "zero-channel feature matrix with {} values", data.len());
            }
        } else if data.len() % channels != 0 {
            bail!(Shape, "{} values do not split into rows of {}", data.len(), channels);
        }
        Ok(FeatureMatrix { channels, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            channels: self.channels,
            data,
        }
    }
}

/// Positions in meters (world frame) with optional per-point features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    positions: Vec<[T; 3]>,
    features: Option<FeatureMatrix<T>>,
    labels: Option<Vec<u16>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(positions: Vec<[T; 3]>) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            bail!(Validation, "point {i} has a non-finite coordinate");
        }
        Ok(PointCloud {
            positions,
            features: None,
            labels: None,
        })
    }

    pub fn empty() -> Self {
        PointCloud {
            positions: Vec::new(),
            features: None,
            labels: None,
        }
    }

    pub fn with_features(mut self, features: FeatureMatrix<T>) -> Result<Self> {
        if features.rows() != self.len() && !(features.channels() == 0 && self.is_empty()) {
            bail!(
                Shape,
                "feature rows {} do not match point count {}",
                features.rows(),
                self.len()
            );
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.len() {
            bail!(Shape, "label count {} does not match point count {}", labels.len(), self.len());
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    pub fn features(&self) -> Option<&FeatureMatrix<T>> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Sub-cloud of the given rows, in the given order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.as_ref().map(|f| f.select(indices)),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Concatenates clouds; features and labels survive only if every part has them.
    pub fn concat(parts: &[PointCloud<T>]) -> Result<Self> {
        let positions: Vec<[T; 3]> = parts.iter().flat_map(|p| p.positions.iter().copied()).collect();
        let features = if !parts.is_empty() && parts.iter().all(|p| p.features.is_some()) {
            let channels = parts[0].features.as_ref().map_or(0, |f| f.channels());
            if parts
                .iter()
                .any(|p| p.features.as_ref().map_or(0, |f| f.channels()) != channels)
            {
                bail!(Shape, "cannot concatenate clouds with different feature widths");
            }
            let data = parts
                .iter()
                .flat_map(|p| p.features.as_ref().map_or(&[][..], |f| f.data()).iter().copied())
                .collect();
            Some(FeatureMatrix { channels, data })
        } else {
            None
        };
        let labels = if !parts.is_empty() && parts.iter().all(|p| p.labels.is_some()) {
            Some(parts.iter().flat_map(|p| p.labels.as_deref().unwrap_or(&[]).iter().copied()).collect())
        } else {
            None
        };
        Ok(PointCloud {
            positions,
            features,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let intrinsics = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            bail!(Validation, "focal lengths must be positive");
        }
        let w = T::from_usize(self.width).unwrap_or(T::zero());
        let h = T::from_usize(self.height).unwrap_or(T::zero());
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            bail!(
                Validation,
                "principal point ({}, {}) outside {}x{} image",
                self.cx,
                self.cy,
                self.width,
                self.height
            );
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rigid transform from camera coordinates to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let pose = Pose {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Pose {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let tol = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i].as_f64() * r[k][j].as_f64()).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    bail!(Validation, "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})");
                }
            }
        }
        let det = det3(r);
        if (det - 1.0).abs() > tol {
            bail!(Validation, "rotation determinant {det} is not +1");
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            bail!(Validation, "non-finite translation");
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`; camera x points right, y down, z forward.
    pub fn look_at(eye: [T; 3], target: [T; 3], up: [T; 3]) -> Result<Self> {
        let forward = normalize(sub(target, eye))?;
        let right = normalize(cross(forward, up))?;
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Pose::new(rotation, eye)
    }

    #[inline]
    pub fn to_world(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    #[inline]
    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let d = sub(p, self.translation);
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Applies a world-frame rotation by `angle` about the vertical axis through `center`.
    pub fn rotated_about_z(&self, angle: T, center: [T; 3]) -> Self {
        let rz = rotation_z(angle);
        let mut rotation = [[T::zero(); 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| rz[i][k] * self.rotation[k][j]).sum();
            }
        }
        Pose {
            rotation,
            translation: rotate_point_about_z(&rz, self.translation, center),
        }
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|row| row.map(|v| U::lit(v.as_f64()))),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

pub fn rotation_z<T: Real>(angle: T) -> [[T; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

#[inline]
pub fn rotate_point_about_z<T: Real>(rz: &[[T; 3]; 3], p: [T; 3], center: [T; 3]) -> [T; 3] {
    let d = sub(p, center);
    [
        rz[0][0] * d[0] + rz[0][1] * d[1] + center[0],
        rz[1][0] * d[0] + rz[1][1] * d[1] + center[1],
        d[2] + center[2],
    ]
}

fn det3<T: Real>(r: &[[T; 3]; 3]) -> f64 {
    let m = r.map(|row| row.map(|v| v.as_f64()));
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[inline]
pub(crate) fn sub<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn sq_dist<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn normalize<T: Real>(v: [T; 3]) -> Result<[T; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > T::lit(1e-12)) {
        bail!(Validation, "cannot normalize a zero vector");
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// One RGB-D observation: color and depth images plus the camera that took them.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame<T> {
    /// `height × width × 3`, row-major, values in `[0, 1]`.
    pub rgb: Vec<T>,
    /// `height × width` meters; 0 marks an invalid pixel.
    pub depth: Vec<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: Pose<T>,
    pub frame_id: usize,
}

impl<T: Real> RgbdFrame<T> {
    pub fn new(
        rgb: Vec<T>,
        depth: Vec<T>,
        intrinsics: CameraIntrinsics<T>,
        pose: Pose<T>,
        frame_id: usize,
    ) -> Result<Self> {
        let frame = RgbdFrame {
            rgb,
            depth,
            intrinsics,
            pose,
            frame_id,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        let n = self.intrinsics.pixel_count();
        if self.depth.len() != n || self.rgb.len() != 3 * n {
            bail!(
                Shape,
                "frame {} images do not match {}x{}",
                self.frame_id,
                self.intrinsics.width,
                self.intrinsics.height
            );
        }
        if self.depth.iter().any(|d| !(*d >= T::zero()) || !d.is_finite()) {
            bail!(Validation, "frame {} has negative or non-finite depth", self.frame_id);
        }
        if self.rgb.iter().any(|c| !(*c >= T::zero() && *c <= T::one())) {
            bail!(Validation, "frame {} has rgb outside [0, 1]", self.frame_id);
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn valid_pixels(&self) -> Vec<usize> {
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > T::zero())
            .map(|(i, _)| i)
            .collect()
    }

    /// World position of pixel `(u, v)` (column, row) at depth `d`.
    #[inline]
    pub fn pixel_to_world(&self, u: usize, v: usize, d: T) -> [T; 3] {
        let k = &self.intrinsics;
        let uf = T::from_usize(u).unwrap_or(T::zero());
        let vf = T::from_usize(v).unwrap_or(T::zero());
        self.pose
            .to_world([(uf - k.cx) * d / k.fx, (vf - k.cy) * d / k.fy, d])
    }

    /// Same frame seen from a pose rotated about the vertical axis through `center`.
    pub fn rotated_about_z(&self, angle: T, center: [T; 3]) -> Self {
        RgbdFrame {
            pose: self.pose.rotated_about_z(angle, center),
            ..self.clone()
        }
    }
}

/// Lifted pixels of one frame: world positions and the flat pixel index each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Unprojection<T> {
    pub positions: Vec<[T; 3]>,
    pub pixels: Vec<usize>,
}

/// Unprojects valid-depth pixels, keeping a uniform random subset of at most `max_points`.
/// Surviving pixels stay in row-major order.
pub fn unproject_pixels<T: Real, R: Rng + ?Sized>(
    frame: &RgbdFrame<T>,
    max_points: usize,
    rng: &mut R,
) -> Result<Unprojection<T>> {
    if max_points == 0 {
        bail!(Validation, "max_points must be at least 1");
    }
    let valid = frame.valid_pixels();
    let pixels = if valid.len() > max_points {
        let mut picked = rand::seq::index::sample(rng, valid.len(), max_points).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| valid[i]).collect()
    } else {
        valid
    };
    let w = frame.width();
    let positions = pixels
        .iter()
        .map(|&p| frame.pixel_to_world(p % w, p / w, frame.depth[p]))
        .collect();
    Ok(Unprojection { positions, pixels })
}

/// Every valid-depth pixel of a frame, in row-major order.
pub fn unproject_all<T: Real>(frame: &RgbdFrame<T>) -> Unprojection<T> {
    let pixels = frame.valid_pixels();
    let w = frame.width();
    let positions = pixels
        .iter()
        .map(|&p| frame.pixel_to_world(p % w, p / w, frame.depth[p]))
        .collect();
    Unprojection { positions, pixels }
}

/// Lifts a depth frame to a world-frame point cloud, optionally carrying a
/// `height × width × channels` per-pixel feature image along.
pub fn unproject<T: Real, R: Rng + ?Sized>(
    frame: &RgbdFrame<T>,
    max_points: usize,
    rng: &mut R,
    per_pixel_features: Option<&FeatureMatrix<T>>,
) -> Result<PointCloud<T>> {
    if let Some(f) = per_pixel_features {
        if f.rows() != frame.intrinsics.pixel_count() {
            bail!(
                Shape,
                "per-pixel features have {} rows for a {}x{} frame",
                f.rows(),
                frame.width(),
                frame.height()
            );
        }
    }
    let lifted = unproject_pixels(frame, max_points, rng)?;
    let cloud = PointCloud::new(lifted.positions)?;
    match per_pixel_features {
        Some(f) => cloud.with_features(f.select(&lifted.pixels)),
        None => Ok(cloud),
    }
}

/// Continuous pixel coordinates and depth of a world point, or `None` when it
/// is behind the camera or outside the image. Pixel centers sit at integer
/// coordinates, so the image spans `[-0.5, width - 0.5) × [-0.5, height - 0.5)`.
pub fn project<T: Real>(point: [T; 3], frame: &RgbdFrame<T>) -> Option<(T, T, T)> {
    let c = frame.pose.to_camera(point);
    if !(c[2] > T::zero()) {
        return None;
    }
    let k = &frame.intrinsics;
    let u = c[0] * k.fx / c[2] + k.cx;
    let v = c[1] * k.fy / c[2] + k.cy;
    let w = T::from_usize(k.width).unwrap_or(T::zero());
    let h = T::from_usize(k.height).unwrap_or(T::zero());
    let half = T::lit(0.5);
    if u >= -half && u < w - half && v >= -half && v < h - half {
        Some((u, v, c[2]))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(depth: Vec<f64>, k: CameraIntrinsics<f64>, pose: Pose<f64>) -> RgbdFrame<f64> {
        let n = k.pixel_count();
        RgbdFrame::new(vec![0.5; 3 * n], depth, k, pose, 0).unwrap()
    }

    #[test]
    fn principal_point_ray_lands_on_optical_axis() {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 1.0, 4, 3).unwrap();
        let mut depth = vec![0.0; 12];
        depth[1 * 4 + 2] = 2.0;
        let f = frame(depth, k, Pose::identity());
        let cloud = unproject(&f, 100, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(cloud.positions(), &[[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn unit_focal_pinhole_arithmetic() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 3, 2).unwrap();
        let mut depth = vec![0.0; 6];
        depth[1 * 3 + 2] = 2.0;
        let f = frame(depth, k, Pose::identity());
        let cloud = unproject(&f, 10, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(cloud.positions(), &[[4.0, 2.0, 2.0]]);
    }

    #[test]
    fn all_invalid_depth_gives_empty_cloud() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 3, 2).unwrap();
        let f = frame(vec![0.0; 6], k, Pose::identity());
        let cloud = unproject(&f, 10, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn subsampling_keeps_exact_budget_and_features_follow_pixels() {
        let k = CameraIntrinsics::new(5.0, 5.0, 2.0, 2.0, 5, 4).unwrap();
        let f = frame(vec![1.5; 20], k, Pose::identity());
        let feats = FeatureMatrix::new(2, (0..40).map(|i| i as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lifted = unproject_pixels(&f, 7, &mut rng).unwrap();
        assert_eq!(lifted.pixels.len(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = unproject(&f, 7, &mut rng, Some(&feats)).unwrap();
        let fm = cloud.features().unwrap();
        for (row, &p) in lifted.pixels.iter().enumerate() {
            assert_eq!(fm.row(row), &[2.0 * p as f64, 2.0 * p as f64 + 1.0]);
        }
    }

    #[test]
    fn mismatched_feature_image_is_a_shape_error() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 3, 2).unwrap();
        let f = frame(vec![1.0; 6], k, Pose::identity());
        let feats = FeatureMatrix::new(2, vec![0.0; 10]).unwrap();
        let err = unproject(&f, 10, &mut ChaCha8Rng::seed_from_u64(0), Some(&feats)).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn project_inverts_unproject_and_rejects_points_behind() {
        let k = CameraIntrinsics::new(30.0, 28.0, 20.0, 16.0, 40, 32).unwrap();
        let f = frame(vec![0.0; 40 * 32], k, Pose::identity());
        assert_eq!(project([0.0, 0.0, 2.0], &f), Some((20.0, 16.0, 2.0)));
        assert_eq!(project([0.0, 0.0, -1.0], &f), None);
        let p = f.pixel_to_world(7, 3, 1.25);
        let (u, v, d) = project(p, &f).unwrap();
        assert!((u - 7.0).abs() < 1e-9 && (v - 3.0).abs() < 1e-9 && (d - 1.25).abs() < 1e-9);
    }

    #[test]
    fn look_at_builds_proper_rotation() {
        let pose = Pose::<f64>::look_at([1.0, 0.5, 1.4], [2.0, 2.0, 0.5], [0.0, 0.0, 1.0]).unwrap();
        let c = pose.to_camera([2.0, 2.0, 0.5]);
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12 && c[2] > 0.0);
        assert!(Pose::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], [0.0; 3]).is_err());
    }

    #[test]
    fn rotating_pose_moves_unprojected_points_rigidly() {
        let k = CameraIntrinsics::new(3.0, 3.0, 1.0, 1.0, 3, 3).unwrap();
        let pose = Pose::look_at([0.0, 0.0, 1.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let f = frame(vec![2.0; 9], k, pose);
        let center = [1.0, 1.0, 0.0];
        let g = f.rotated_about_z(0.7, center);
        let rz = rotation_z(0.7);
        for (u, v) in [(0, 0), (2, 1), (1, 2)] {
            let a = rotate_point_about_z(&rz, f.pixel_to_world(u, v, 2.0), center);
            let b = g.pixel_to_world(u, v, 2.0);
            assert!(sq_dist(&a, &b) < 1e-24);
        }
    }

    #[test]
    fn cloud_invariants_are_enforced() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        let c = PointCloud::new(vec![[0.0f64; 3]; 2]).unwrap();
        assert!(c.clone().with_labels(vec![1]).is_err());
        assert!(c.with_features(FeatureMatrix::new(3, vec![0.0; 3]).unwrap()).is_err());
        assert!(PointCloud::<f32>::empty().is_empty());
    }
}
