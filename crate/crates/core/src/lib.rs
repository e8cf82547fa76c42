//! Multi-view RGB-D feature lifting and point-network fusion for indoor
//! semantic segmentation, generic over `f32`/`f64`.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod gradsuite;
pub mod lift;
pub mod net2d;
pub mod nn;
pub mod pipeline;
pub mod pointnet2;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod viewsel;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type PointCloud32 = geom::PointCloud<f32>;
pub type PointCloud64 = geom::PointCloud<f64>;
pub type Frame32 = geom::RgbdFrame<f32>;
pub type Frame64 = geom::RgbdFrame<f64>;
pub type Scene32 = scene::Scene<f32>;
pub type Scene64 = scene::Scene<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
/// Models train in single precision; gradient checks run in double.
pub type FusionModel32 = pipeline::FusionModel<f32>;
pub type FusionModel64 = pipeline::FusionModel<f64>;
