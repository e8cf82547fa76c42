//! Minimal reverse-mode automatic differentiation over dense tensors, plus
//! the layers, optimizer and checkpointing built on it.

pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{apply_stat_updates, BatchNorm, Conv2d, ConvTranspose2d, Linear, SharedMlp};
pub use optim::{sgd_step, SgdConfig};
pub use params::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointHeader, Param, ParamId, ParamStore};
pub use tape::{GroupReduce, Mode, StatUpdate, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
