//! End-to-end model bundle, chunk preparation, training and sliding-window inference.

mod chunk;
mod infer;
mod train;

pub use chunk::{
    chunk_members, forward_chunks, forward_with_store, prepare_chunk, resample, sample_train_chunk, ChunkSpec, LiftInputs,
    PreparedChunk,
};
pub use infer::{grid_origins, infer_scene, tally_votes, window_origins, window_views, InferConfig, InferResult, WindowViews};
pub use train::{class_weights, feature_cache, train, EpochMetrics, TrainConfig, TrainLog};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::lift::{Aggregator, AggregatorConfig};
use crate::net2d::{Unet2d, Unet2dConfig};
use crate::nn::{read_checkpoint, write_checkpoint, CheckpointHeader, ParamStore};
use crate::pointnet2::{BackboneConfig, Fusion, Pointnet2};
use crate::Real;

/// Everything that fixes the network architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub net2d: Unet2dConfig,
    pub lift: AggregatorConfig,
    pub backbone: BackboneConfig,
    pub fusion: Fusion,
    /// Feed normalized coordinates as input point features.
    pub use_xyz: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            net2d: Unet2dConfig::default(),
            lift: AggregatorConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: Fusion::Early,
            use_xyz: true,
        }
    }
}

/// 2D network, lifting module and point network sharing one parameter store.
pub struct FusionModel<T> {
    pub config: ModelConfig,
    pub net2d: Option<Unet2d>,
    pub lift: Option<Aggregator>,
    pub backbone: Pointnet2,
    pub store: ParamStore<T>,
    net2d_loaded: bool,
}

impl<T: Real> FusionModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (net2d, lift, lifted_dim) = if config.fusion.uses_lifted() {
            let net = Unet2d::new(config.net2d.clone(), &mut store, &mut rng)?;
            let agg = Aggregator::new(config.lift.clone(), config.net2d.feature_dim, &mut store, &mut rng)?;
            let c = agg.out_channels();
            (Some(net), Some(agg), c)
        } else {
            (None, None, 0)
        };
        let backbone = Pointnet2::new(config.backbone.clone(), config.fusion, config.use_xyz, lifted_dim, &mut store, &mut rng)?;
        Ok(FusionModel {
            config,
            net2d,
            lift,
            backbone,
            store,
            net2d_loaded: false,
        })
    }

    pub fn fusion(&self) -> Fusion {
        self.config.fusion
    }

    pub fn net2d_loaded(&self) -> bool {
        self.net2d_loaded
    }

    /// Copies pretrained 2D weights into the bundle.
    pub fn load_net2d(&mut self, pretrained: &ParamStore<T>) -> Result<()> {
        if self.net2d.is_none() {
            return Ok(());
        }
        self.store.load_from(pretrained, crate::net2d::PREFIX)?;
        self.net2d_loaded = true;
        Ok(())
    }

    pub fn save(&self, path: &Path, epoch: usize, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "model": self.config,
            "net2d_loaded": self.net2d_loaded,
        });
        write_checkpoint(path, &self.store, epoch, seed, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (store, header) = read_checkpoint::<T>(path)?;
        let config: ModelConfig = serde_json::from_value(header.meta["model"].clone())
            .map_err(|e| Error::format(path, format!("checkpoint model config: {e}")))?;
        let mut model = FusionModel::new(config, 0)?;
        if model.store.len() != store.len() {
            bail!(Dependency, "checkpoint has {} tensors, model expects {}", store.len(), model.store.len());
        }
        model.store.load_from(&store, "")?;
        for (dst, (_, src)) in model.store.iter_mut().zip(store.iter()) {
            dst.trainable = src.trainable;
        }
        model.net2d_loaded = header.meta["net2d_loaded"].as_bool().unwrap_or(false);
        Ok((model, header))
    }
}

/// Deterministic 64-bit mix of a seed with a few counters.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x6A09_E667_F3BC_C909;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests;
