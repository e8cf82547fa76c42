//! Segmentation metrics and the point-density robustness sweep.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::geom::{FeatureMatrix, IGNORE_LABEL};
use crate::pipeline::{derive_seed, infer_scene, FusionModel, InferConfig};
use crate::scene::Scene;
use crate::Real;

/// `classes × classes` counts; row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds paired labels; ground-truth entries equal to the ignore label are skipped.
    pub fn add(&mut self, truth: &[u16], pred: &[u16]) -> Result<()> {
        if truth.len() != pred.len() {
            bail!(Shape, "{} ground-truth labels against {} predictions", truth.len(), pred.len());
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                bail!(Validation, "label pair ({t}, {p}) outside {} classes", self.classes);
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            bail!(Shape, "cannot merge {} and {} class matrices", self.classes, other.classes);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Per-class IoU (`None` when the class never occurs in truth or prediction)
    /// and their mean over the defined classes.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let k = self.classes;
        let ious: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        (ious, mean)
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        diag as f64 / total as f64
    }
}

/// Runs sliding-window inference on every scene and accumulates one matrix.
/// `caches[i]` are the frozen 2D feature maps of scene `i`, when the model uses them.
pub fn evaluate_scenes<T: Real>(
    model: &FusionModel<T>,
    scenes: &[Scene<T>],
    caches: Option<&[Vec<FeatureMatrix<T>>]>,
    cfg: &InferConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.backbone.num_classes);
    for (i, scene) in scenes.iter().enumerate() {
        let cache = caches.map(|c| c[i].as_slice());
        let res = infer_scene(model, scene, cache, cfg)?;
        cm.add(scene.labels(), &res.labels)?;
    }
    Ok(cm)
}

/// One row of the density sweep. `miou` is `None` when the ratio left nothing to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub ratio: f64,
    pub retained: usize,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

/// Keeps `round(ratio · n)` uniformly chosen points (all of them at ratio 1) and
/// rebuilds the coverage index. Images stay at full resolution.
pub fn subsample_scene<T: Real>(scene: &Scene<T>, ratio: f64, seed: u64) -> Result<Scene<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        bail!(Validation, "keep ratio {ratio} outside (0, 1]");
    }
    if ratio == 1.0 {
        return Ok(scene.clone());
    }
    let n = scene.cloud.len();
    let keep = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Scene::new(
        scene.name.clone(),
        scene.cloud.select(&idx),
        idx.iter().map(|&i| scene.colors[i]).collect(),
        scene.frames.clone(),
        scene.labels2d.clone(),
    )
}

/// mIoU of one model over several keep ratios of the scene points.
pub fn density_robustness<T: Real>(
    model: &FusionModel<T>,
    scenes: &[Scene<T>],
    caches: Option<&[Vec<FeatureMatrix<T>>]>,
    ratios: &[f64],
    cfg: &InferConfig,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let classes = model.config.backbone.num_classes;
    let mut rows = Vec::with_capacity(ratios.len());
    for (r, &ratio) in ratios.iter().enumerate() {
        let mut cm = ConfusionMatrix::new(classes);
        let mut retained = 0;
        let mut evaluable = ratio > 0.0 && ratio <= 1.0;
        if evaluable {
            for (i, scene) in scenes.iter().enumerate() {
                let sub = subsample_scene(scene, ratio, derive_seed(seed, &[r as u64, i as u64]))?;
                retained += sub.cloud.len();
                if sub.cloud.is_empty() {
                    evaluable = false;
                    break;
                }
                let cache = caches.map(|c| c[i].as_slice());
                let res = infer_scene(model, &sub, cache, cfg)?;
                cm.add(sub.labels(), &res.labels)?;
            }
        }
        let (per_class, miou) = cm.miou();
        rows.push(RobustnessRow {
            ratio,
            retained,
            miou: evaluable.then_some(miou),
            per_class: if evaluable { per_class } else { vec![None; classes] },
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// `ratio,retained,<class ious...>,miou`, rows sorted by ratio.
pub fn robustness_csv(rows: &[RobustnessRow], class_names: &[&str]) -> String {
    let mut sorted: Vec<&RobustnessRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let mut out = String::from("ratio,retained");
    for n in class_names {
        let _ = write!(out, ",iou_{n}");
    }
    out.push_str(",miou\n");
    for r in sorted {
        let _ = write!(out, "{},{}", r.ratio, r.retained);
        for v in &r.per_class {
            let _ = write!(out, ",{}", fmt_opt(*v));
        }
        let _ = writeln!(out, ",{}", fmt_opt(r.miou));
    }
    out
}

/// Line chart of mIoU against keep ratio (log-2 x axis), one polyline per series.
pub fn robustness_svg(series: &[(&str, &[RobustnessRow])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let ratios: Vec<f64> = series
        .iter()
        .flat_map(|(_, rows)| rows.iter().filter(|r| r.ratio > 0.0).map(|r| r.ratio.log2()))
        .collect();
    let xmin = ratios.iter().copied().fold(f64::INFINITY, f64::min).min(-1.0);
    let xmax = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let sx = |lr: f64| M + (lr - xmin) / (xmax - xmin).max(1e-9) * (W - 2.0 * M);
    let sy = |v: f64| H - M - v * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = H - M,
        x1 = W - M
    );
    let mut lr = xmax;
    while lr >= xmin - 1e-9 {
        let x = sx(lr);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{a}\" x2=\"{x:.1}\" y2=\"{b}\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{t}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt_ratio(2f64.powf(lr)),
            a = H - M,
            b = H - M + 4.0,
            t = H - M + 16.0
        );
        lr -= 1.0;
    }
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            "<line x1=\"{a}\" y1=\"{y:.1}\" x2=\"{M}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{t}\" y=\"{ty:.1}\" font-size=\"10\" text-anchor=\"end\">{:.0}</text>",
            v * 100.0,
            a = M - 4.0,
            t = M - 6.0,
            ty = y + 3.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">keep ratio</text>\n<text x=\"12\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">mIoU (%)</text>",
        W / 2.0,
        H - 8.0,
        H / 2.0,
        H / 2.0
    );
    for (k, (name, rows)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.ratio > 0.0)
            .filter_map(|r| r.miou.map(|m| (r.ratio.log2(), m)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            path.join(" "),
            W - M - 80.0,
            M + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_ratio(r: f64) -> String {
    if r >= 1.0 {
        "1".into()
    } else {
        format!("1/{}", (1.0 / r).round())
    }
}

/// Writes `text` to `path`, mapping failures to an io error.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
