//! Experiment steps shared by the command line and the end-to-end tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{density_robustness, evaluate_scenes, ConfusionMatrix, RobustnessRow};
use crate::net2d::{pretrain2d, LabelledImage, Unet2d};
use crate::nn::ParamStore;
use crate::pipeline::{feature_cache, train, EpochMetrics, FusionModel, TrainLog};
use crate::scene::Scene;
use crate::Real;

/// Pretrained 2D network weights plus the per-step losses.
pub struct Pretrained<T> {
    pub net: Unet2d,
    pub store: ParamStore<T>,
    pub losses: Vec<f64>,
}

/// Trains the 2D network on every rendered frame of `scenes`.
pub fn pretrain<T: Real>(cfg: &ExperimentConfig, scenes: &[Scene<T>], seed: u64) -> Result<Pretrained<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Unet2d::new(cfg.net2d.model.clone(), &mut store, &mut rng)?;
    let data: Vec<LabelledImage<'_, T>> = scenes
        .iter()
        .flat_map(|s| {
            s.frames.iter().zip(&s.labels2d).map(|(f, l)| LabelledImage {
                rgb: &f.rgb,
                labels: l,
            })
        })
        .collect();
    let losses = pretrain2d(&net, &mut store, &data, &cfg.net2d.pretrain, seed)?;
    Ok(Pretrained { net, store, losses })
}

/// Builds a model for `cfg`, loads the 2D weights when given and trains it.
pub fn train_model<T: Real>(
    cfg: &ExperimentConfig,
    train_scenes: &[Scene<T>],
    val_scenes: &[Scene<T>],
    net2d: Option<&ParamStore<T>>,
    on_row: impl FnMut(&EpochMetrics),
) -> Result<(FusionModel<T>, TrainLog)> {
    let mut model = FusionModel::new(cfg.model_config(), cfg.train.seed)?;
    if let Some(store) = net2d {
        model.load_net2d(store)?;
    }
    let log = train(&mut model, train_scenes, val_scenes, &cfg.train, &cfg.infer_config(), on_row)?;
    Ok((model, log))
}

/// Sliding-window evaluation with cached 2D features.
pub fn evaluate<T: Real>(cfg: &ExperimentConfig, model: &FusionModel<T>, scenes: &[Scene<T>]) -> Result<ConfusionMatrix> {
    let caches = feature_cache(model, scenes)?;
    evaluate_scenes(model, scenes, caches.as_deref(), &cfg.infer_config())
}

/// Density sweep over `cfg.eval.keep_ratios`.
pub fn robustness<T: Real>(cfg: &ExperimentConfig, model: &FusionModel<T>, scenes: &[Scene<T>]) -> Result<Vec<RobustnessRow>> {
    let caches = feature_cache(model, scenes)?;
    density_robustness(
        model,
        scenes,
        caches.as_deref(),
        &cfg.eval.keep_ratios,
        &cfg.infer_config(),
        cfg.eval.seed,
    )
}
