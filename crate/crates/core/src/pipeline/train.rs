use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::eval::evaluate_scenes;
use crate::geom::{FeatureMatrix, IGNORE_LABEL};
use crate::nn::{apply_stat_updates, sgd_step, Mode, SgdConfig, Tape};
use crate::scene::Scene;
use crate::Real;

use super::chunk::{forward_chunks, prepare_chunk, sample_train_chunk, PreparedChunk};
use super::{derive_seed, FusionModel, InferConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub chunks_per_epoch: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Views selected per chunk.
    pub views_m: usize,
    /// Pixels unprojected per selected view.
    pub n_rgb: usize,
    pub chunk_points: usize,
    pub chunk_size: f64,
    /// Fraction of labelled points a training chunk should reach.
    pub min_annotated: f64,
    pub seed: u64,
    pub freeze_2d: bool,
    /// Weight classes by `1 / ln(1.2 + frequency)`.
    pub class_weights: bool,
    /// Validate every this many epochs (the last epoch is always validated); 0 = only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            chunks_per_epoch: 128,
            batch_size: 4,
            sgd: SgdConfig::default(),
            views_m: 3,
            n_rgb: 512,
            chunk_points: 2048,
            chunk_size: 1.5,
            min_annotated: 0.3,
            seed: 0,
            freeze_2d: true,
            class_weights: false,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.chunks_per_epoch == 0 || self.batch_size == 0 {
            bail!(Validation, "epochs, chunks per epoch and batch size must be positive");
        }
        if self.views_m == 0 || self.n_rgb == 0 || self.chunk_points == 0 {
            bail!(Validation, "views, pixels per view and chunk points must be positive");
        }
        if !(self.chunk_size > 0.0) {
            bail!(Validation, "chunk size must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_annotated) {
            bail!(Validation, "annotated fraction must lie in [0, 1]");
        }
        self.sgd.validate()
    }

    /// Inference settings matching the training chunk geometry.
    pub fn infer_config(&self, stride: f64) -> InferConfig {
        InferConfig {
            stride,
            chunk_size: self.chunk_size,
            chunk_points: self.chunk_points,
            views_m: self.views_m,
            n_rgb: self.n_rgb,
            seed: self.seed,
        }
    }
}

/// One metrics log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub rows: Vec<EpochMetrics>,
}

impl TrainLog {
    /// `epoch,split,loss,miou,iou_<class>...`
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("epoch,split,loss,miou");
        for n in class_names {
            out.push_str(",iou_");
            out.push_str(n);
        }
        out.push('\n');
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", r.epoch, r.split, f(r.loss), f(r.miou)));
            for v in &r.per_class {
                out.push(',');
                out.push_str(&f(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// `1 / ln(1.2 + p_c)` from the label frequencies of `scenes`.
pub fn class_weights<T: Real>(scenes: &[Scene<T>], classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    for s in scenes {
        for &l in s.labels() {
            if l != IGNORE_LABEL && (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    counts.iter().map(|&c| 1.0 / (1.2 + c as f64 / total).ln()).collect()
}

/// Frozen 2D feature maps of every frame of every scene, or `None` when the model
/// does not lift image features.
pub fn feature_cache<T: Real>(model: &FusionModel<T>, scenes: &[Scene<T>]) -> Result<Option<Vec<Vec<FeatureMatrix<T>>>>> {
    let Some(net) = &model.net2d else {
        return Ok(None);
    };
    scenes
        .iter()
        .map(|s| net.features_for(&model.store, &s.frames))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// SGD training on random chunks, with periodic validation by sliding-window inference.
/// `on_row` sees every log row as soon as it is produced.
pub fn train<T: Real>(
    model: &mut FusionModel<T>,
    train_scenes: &[Scene<T>],
    val_scenes: &[Scene<T>],
    cfg: &TrainConfig,
    infer: &InferConfig,
    mut on_row: impl FnMut(&EpochMetrics),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        bail!(Validation, "no training scenes");
    }
    let uses_2d = model.net2d.is_some();
    if uses_2d && cfg.freeze_2d && !model.net2d_loaded() {
        bail!(Dependency, "a frozen 2D network needs pretrained weights");
    }
    if uses_2d {
        model.store.set_trainable(crate::net2d::PREFIX, !cfg.freeze_2d);
        // the 2D class head is not on the feature path
        model.store.set_trainable(&format!("{}.head", crate::net2d::PREFIX), false);
    }
    let classes = model.config.backbone.num_classes;
    let weights: Option<Vec<T>> = cfg
        .class_weights
        .then(|| class_weights(train_scenes, classes).into_iter().map(T::lit).collect());
    let frozen = uses_2d && cfg.freeze_2d;
    let train_cache = if frozen { feature_cache(model, train_scenes)? } else { None };
    let val_cache = if frozen { feature_cache(model, val_scenes)? } else { None };
    let steps = cfg.chunks_per_epoch.div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let batch: Vec<PreparedChunk<T>> = {
                let model = &*model;
                let cache = train_cache.as_deref();
                (0..cfg.batch_size)
                    .into_par_iter()
                    .map(|b| {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, step as u64, b as u64]));
                        let si = rng.random_range(0..train_scenes.len());
                        let scene = &train_scenes[si];
                        let spec = sample_train_chunk(scene, cfg.chunk_size, cfg.chunk_points, cfg.min_annotated, &mut rng)?;
                        let angle = rng.random_range(0.0..TAU);
                        let maps = cache.map(|c| c[si].as_slice());
                        prepare_chunk(model, scene, spec, angle, cfg.views_m, cfg.n_rgb, maps, &mut rng)
                    })
                    .collect::<Result<_>>()?
            };
            let labels: Vec<u16> = batch.iter().flat_map(|c| c.labels.iter().copied()).collect();
            let mut tape = Tape::new();
            let logits = forward_chunks(model, &mut tape, &batch, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels, weights.as_deref())?;
            let lv = tape.value(loss)[0].as_f64();
            if !lv.is_finite() {
                bail!(Numeric, "non-finite loss at epoch {epoch}, step {step}");
            }
            if epoch == 0 && step == 0 {
                log.initial_loss = lv;
            }
            epoch_loss += lv;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut model.store);
            apply_stat_updates(&tape, &mut model.store);
            sgd_step(&mut model.store, &cfg.sgd, epoch)?;
        }
        let row = EpochMetrics {
            epoch: epoch + 1,
            split: "train".into(),
            loss: Some(epoch_loss / steps as f64),
            miou: None,
            per_class: Vec::new(),
        };
        on_row(&row);
        log.rows.push(row);
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !val_scenes.is_empty() && (last || due) {
            let cm = evaluate_scenes(model, val_scenes, val_cache.as_deref(), infer)?;
            let (per_class, miou) = cm.miou();
            let row = EpochMetrics {
                epoch: epoch + 1,
                split: "val".into(),
                loss: None,
                miou: Some(miou),
                per_class,
            };
            on_row(&row);
            log.rows.push(row);
        }
    }
    Ok(log)
}
