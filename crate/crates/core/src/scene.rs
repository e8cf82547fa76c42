//! A labelled scene with its RGB-D stream, and the on-disk directory format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::geom::{CameraIntrinsics, PointCloud, Pose, RgbdFrame};
use crate::viewsel::{build_coverage_index, CoverageIndex, DEFAULT_COARSE_VOXEL, DEFAULT_COVER_THRESHOLD};
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub name: String,
    /// Surface samples with ground-truth labels.
    pub cloud: PointCloud<T>,
    /// Per-point color in `[0, 1]`.
    pub colors: Vec<[T; 3]>,
    pub frames: Vec<RgbdFrame<T>>,
    /// Per-frame, per-pixel class ids (row-major).
    pub labels2d: Vec<Vec<u16>>,
    pub coverage: CoverageIndex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl<T: Real> Scene<T> {
    /// Assembles a scene and builds its coverage index with default thresholds.
    pub fn new(
        name: String,
        cloud: PointCloud<T>,
        colors: Vec<[T; 3]>,
        frames: Vec<RgbdFrame<T>>,
        labels2d: Vec<Vec<u16>>,
    ) -> Result<Self> {
        let coverage = build_coverage_index(
            &cloud,
            &frames,
            T::lit(DEFAULT_COVER_THRESHOLD),
            T::lit(DEFAULT_COARSE_VOXEL),
        )?;
        let scene = Scene {
            name,
            cloud,
            colors,
            frames,
            labels2d,
            coverage,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cloud.labels().is_none() {
            bail!(Validation, "scene {} has no point labels", self.name);
        }
        if self.colors.len() != self.cloud.len() {
            bail!(Shape, "scene {} has {} colors for {} points", self.name, self.colors.len(), self.cloud.len());
        }
        if self.labels2d.len() != self.frames.len() {
            bail!(Shape, "scene {} has {} label maps for {} frames", self.name, self.labels2d.len(), self.frames.len());
        }
        for (f, l) in self.frames.iter().zip(&self.labels2d) {
            f.validate()?;
            if l.len() != f.intrinsics.pixel_count() {
                bail!(Shape, "label map of frame {} has wrong size", f.frame_id);
            }
        }
        self.coverage.validate()
    }

    pub fn labels(&self) -> &[u16] {
        self.cloud.labels().expect("validated scene has labels")
    }

    pub fn frame(&self, frame_id: usize) -> Option<&RgbdFrame<T>> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn frame_slot(&self, frame_id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    pub fn cast<U: Real>(&self) -> Scene<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let cast3 = |p: &[T; 3]| p.map(|x| U::lit(x.as_f64()));
        let positions = self.cloud.positions().iter().map(cast3).collect();
        let cloud = PointCloud::new(positions)
            .and_then(|c| c.with_labels(self.labels().to_vec()))
            .expect("casting keeps a valid cloud");
        Scene {
            name: self.name.clone(),
            cloud,
            colors: self.colors.iter().map(cast3).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| RgbdFrame {
                    rgb: cast_vec(&f.rgb),
                    depth: cast_vec(&f.depth),
                    intrinsics: f.intrinsics.cast(),
                    pose: f.pose.cast(),
                    frame_id: f.frame_id,
                })
                .collect(),
            labels2d: self.labels2d.clone(),
            coverage: self.coverage.clone(),
        }
    }

    /// Writes the scene directory: `points.bin`, `labels.bin`, `colors.bin`,
    /// `frames/<id>/{rgb.ppm, depth.f32, camera.json}`, `labels2d/<id>.u16`
    /// and `coverage.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        mkdir(dir)?;
        write_f32(&dir.join("points.bin"), self.cloud.positions().iter().flatten())?;
        write_file(
            &dir.join("labels.bin"),
            self.labels().iter().flat_map(|l| l.to_le_bytes()).collect(),
        )?;
        write_f32(&dir.join("colors.bin"), self.colors.iter().flatten())?;
        mkdir(&dir.join("labels2d"))?;
        for (frame, labels) in self.frames.iter().zip(&self.labels2d) {
            let fdir = dir.join("frames").join(frame.frame_id.to_string());
            mkdir(&fdir)?;
            write_file(&fdir.join("rgb.ppm"), encode_ppm(frame))?;
            write_f32(&fdir.join("depth.f32"), frame.depth.iter())?;
            let k = &frame.intrinsics;
            let r = &frame.pose.rotation;
            let cam = CameraFile {
                fx: k.fx.as_f64(),
                fy: k.fy.as_f64(),
                cx: k.cx.as_f64(),
                cy: k.cy.as_f64(),
                width: k.width,
                height: k.height,
                rotation: [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|i| r[i / 3][i % 3].as_f64()),
                translation: frame.pose.translation.map(|x| x.as_f64()),
            };
            write_file(&fdir.join("camera.json"), serde_json::to_vec_pretty(&cam)?)?;
            write_file(
                &dir.join("labels2d").join(format!("{}.u16", frame.frame_id)),
                labels.iter().flat_map(|l| l.to_le_bytes()).collect(),
            )?;
        }
        self.coverage.write_json(&dir.join("coverage.json"))
    }

    /// Reads a scene directory. A missing `coverage.json` is rebuilt;
    /// a missing `colors.bin` yields mid-grey colors.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pts = read_f32(&dir.join("points.bin"))?;
        if pts.len() % 3 != 0 {
            return Err(Error::format(dir.join("points.bin"), "length is not a multiple of 3 floats"));
        }
        let positions: Vec<[T; 3]> = pts.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(T::lit)).collect();
        let labels = read_u16(&dir.join("labels.bin"))?;
        let n = positions.len();
        let cloud = PointCloud::new(positions)?.with_labels(labels)?;
        let colors_path = dir.join("colors.bin");
        let colors = if colors_path.exists() {
            let c = read_f32(&colors_path)?;
            if c.len() != 3 * n {
                return Err(Error::format(colors_path, "color count does not match points"));
            }
            c.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(T::lit)).collect()
        } else {
            vec![[T::lit(0.5); 3]; n]
        };
        let mut ids: Vec<usize> = Vec::new();
        let fdir = dir.join("frames");
        for entry in fs::read_dir(&fdir).map_err(|e| Error::io(&fdir, e))? {
            let entry = entry.map_err(|e| Error::io(&fdir, e))?;
            let id = entry.file_name().to_string_lossy().parse::<usize>().map_err(|_| {
                Error::format(entry.path(), "frame directory name is not an integer id")
            })?;
            ids.push(id);
        }
        ids.sort_unstable();
        let mut frames = Vec::with_capacity(ids.len());
        let mut labels2d = Vec::with_capacity(ids.len());
        for id in ids {
            let f = fdir.join(id.to_string());
            let cam_path = f.join("camera.json");
            let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
            let cam: CameraFile =
                serde_json::from_str(&text).map_err(|e| Error::format(&cam_path, e.to_string()))?;
            let intrinsics = CameraIntrinsics::new(
                T::lit(cam.fx),
                T::lit(cam.fy),
                T::lit(cam.cx),
                T::lit(cam.cy),
                cam.width,
                cam.height,
            )?;
            let r = cam.rotation.map(T::lit);
            let pose = Pose::new(
                [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                cam.translation.map(T::lit),
            )?;
            let rgb = decode_ppm(&f.join("rgb.ppm"), cam.width, cam.height)?;
            let depth: Vec<T> = read_f32(&f.join("depth.f32"))?.into_iter().map(T::lit).collect();
            let lpath = dir.join("labels2d").join(format!("{id}.u16"));
            let labels = read_u16(&lpath)?;
            if labels.len() != cam.width * cam.height {
                return Err(Error::format(lpath, "label map size does not match camera"));
            }
            frames.push(RgbdFrame::new(rgb, depth, intrinsics, pose, id)?);
            labels2d.push(labels);
        }
        let cov_path = dir.join("coverage.json");
        if cov_path.exists() {
            let coverage = CoverageIndex::read_json(&cov_path)?;
            if coverage.frame_ids() != frames.iter().map(|f| f.frame_id).collect::<Vec<_>>()
                || coverage.coarse_ids.last().map_or(false, |&i| i >= n)
            {
                return Err(Error::format(cov_path, "coverage index does not match the scene"));
            }
            let scene = Scene {
                name,
                cloud,
                colors,
                frames,
                labels2d,
                coverage,
            };
            scene.validate()?;
            Ok(scene)
        } else {
            Scene::new(name, cloud, colors, frames, labels2d)
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn write_f32<'a, T: Real, I: Iterator<Item = &'a T>>(p: &Path, values: I) -> Result<()> {
    write_file(p, values.flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect())
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::io(p, e))
}

/// Little-endian `f32` values widened to `f64`.
pub fn read_f32(p: &Path) -> Result<Vec<f64>> {
    let b = read_bytes(p)?;
    if b.len() % 4 != 0 {
        return Err(Error::format(p, "length is not a multiple of 4 bytes"));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn read_u16(p: &Path) -> Result<Vec<u16>> {
    let b = read_bytes(p)?;
    if b.len() % 2 != 0 {
        return Err(Error::format(p, "length is not a multiple of 2 bytes"));
    }
    Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

/// 8-bit quantization used by the PPM encoding.
pub fn quantize_unit<T: Real>(c: T) -> u8 {
    (c.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_ppm<T: Real>(frame: &RgbdFrame<T>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.rgb.iter().map(|&c| quantize_unit(c)));
    out
}

fn decode_ppm<T: Real>(p: &Path, width: usize, height: usize) -> Result<Vec<T>> {
    let b = read_bytes(p)?;
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < b.len() && !b[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(p, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&b[start..i]).into_owned());
    }
    i += 1;
    let dims = (fields[1].parse::<usize>().ok(), fields[2].parse::<usize>().ok());
    if fields[0] != "P6" || fields[3] != "255" || dims != (Some(width), Some(height)) {
        return Err(Error::format(p, format!("expected a {width}x{height} P6 image with maxval 255")));
    }
    let body = b.get(i..).unwrap_or(&[]);
    if body.len() != width * height * 3 {
        return Err(Error::format(p, "PPM pixel data has the wrong length"));
    }
    Ok(body.iter().map(|&v| T::lit(v as f64 / 255.0)).collect())
}

/// Scene directories directly below `root`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("points.bin").exists() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}
