use std::path::Path;

pub use crate::checkpoint::{CheckpointIndex, TensorEntry};
use crate::checkpoint::{fill_named, read_tensor_set, write_tensor_set};
use crate::error::Result;

use super::{ModelConfig, ModelParams};

const KIND: &str = "asd-head";

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<CheckpointIndex<ModelConfig>> {
    write_tensor_set(dir.as_ref(), KIND, cfg, &params.named())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams<f32>, ModelConfig)> {
    let (index, tensors) = read_tensor_set::<ModelConfig>(dir.as_ref(), KIND)?;
    let mut params = ModelParams::init(&index.config)?;
    fill_named(params.named_mut(), tensors)?;
    Ok((params, index.config))
}
