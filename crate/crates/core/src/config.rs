//! One JSON document configuring a whole experiment. Every field is optional;
//! unknown keys are rejected with the offending path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lift::AggregatorConfig;
use crate::net2d::{Pretrain2dConfig, Unet2dConfig};
use crate::pipeline::{InferConfig, ModelConfig, TrainConfig};
use crate::pointnet2::{BackboneConfig, Fusion};
use crate::synth::{SynthConfig, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net2dSection {
    pub model: Unet2dConfig,
    pub pretrain: Pretrain2dConfig,
}

impl Default for Net2dSection {
    fn default() -> Self {
        Net2dSection {
            model: Unet2dConfig::default(),
            pretrain: Pretrain2dConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub network: BackboneConfig,
    pub fusion: Fusion,
    /// Feed normalized coordinates as point features.
    pub use_xyz: bool,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            network: BackboneConfig::default(),
            fusion: Fusion::Early,
            use_xyz: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Sliding-window stride in meters.
    pub stride: f64,
    pub keep_ratios: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            stride: 0.5,
            keep_ratios: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub net2d: Net2dSection,
    pub lift: AggregatorConfig,
    pub backbone: BackboneSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

fn field(path: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config {
            path: path.into(),
            message: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the dotted path of the bad field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(|e| field("synth", e))?;
        self.net2d.model.validate().map_err(|e| field("net2d.model", e))?;
        self.net2d.pretrain.sgd.validate().map_err(|e| field("net2d.pretrain.sgd", e))?;
        self.lift.validate().map_err(|e| field("lift", e))?;
        self.backbone.network.validate().map_err(|e| field("backbone.network", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.net2d.model.input_size != (self.synth.width, self.synth.height) {
            return bad(
                "net2d.model.input_size",
                format!("must match the rendered image size {}x{}", self.synth.width, self.synth.height),
            );
        }
        if self.net2d.model.num_classes != NUM_CLASSES {
            return bad("net2d.model.num_classes", format!("corpus has {NUM_CLASSES} classes"));
        }
        if self.backbone.network.num_classes != NUM_CLASSES {
            return bad("backbone.network.num_classes", format!("corpus has {NUM_CLASSES} classes"));
        }
        if self.train.views_m > self.synth.frames_per_scene {
            return bad(
                "train.views_m",
                format!("cannot select {} of {} frames", self.train.views_m, self.synth.frames_per_scene),
            );
        }
        if self.train.chunk_points < self.backbone.network.centroid_counts[0] {
            return bad("train.chunk_points", "fewer points than first-level centroids".into());
        }
        if !(self.eval.stride > 0.0) {
            return bad("eval.stride", "must be positive".into());
        }
        if let Some(r) = self.eval.keep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad("eval.keep_ratios", format!("ratio {r} outside (0, 1]"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            net2d: self.net2d.model.clone(),
            lift: self.lift.clone(),
            backbone: self.backbone.network.clone(),
            fusion: self.backbone.fusion,
            use_xyz: self.backbone.use_xyz,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            seed: self.eval.seed,
            ..self.train.infer_config(self.eval.stride)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"sgd": {"lrr": 0.1}}}"#).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "train.sgd.lrr");
                assert!(message.contains("lrr"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn type_error_reports_its_path() {
        let err = ExperimentConfig::from_json(r#"{"backbone": {"network": {"radii": [0.1, "x"]}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "backbone.network.radii[1]"), "{err:?}");
    }

    #[test]
    fn cross_section_checks() {
        let err = ExperimentConfig::from_json(r#"{"synth": {"width": 48}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "net2d.model.input_size"));
        let err = ExperimentConfig::from_json(r#"{"train": {"views_m": 50}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.views_m"));
        let err = ExperimentConfig::from_json(r#"{"train": {"epochs": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train"));
        let err = ExperimentConfig::from_json(r#"{"backbone": {"fusion": "sideways"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "backbone.fusion"));
    }
}
