use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::ModelParams;
use crate::Scalar;

const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-identically. Per-step random
/// streams are derived from `(seed, step)`, so those two fields are the
/// whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub scalar: String,
    pub config_hash: String,
    pub seed: u64,
    /// Steps completed.
    pub step: usize,
    pub params: ModelParams<T>,
    pub velocity: ModelParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_hash: String, seed: u64, step: usize, params: ModelParams<T>, velocity: ModelParams<T>) -> Self {
        Self { format_version: FORMAT_VERSION, scalar: scalar_name::<T>(), config_hash, seed, step, params, velocity }
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let text = serde_json::to_string(self)
            .map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), message: e.to_string() })?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        let corrupt = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {} (expected {FORMAT_VERSION})", ckpt.format_version)));
        }
        if ckpt.scalar != scalar_name::<T>() {
            return Err(corrupt(format!("written for {}, loading as {}", ckpt.scalar, scalar_name::<T>())));
        }
        if !ckpt.params.same_shape(&ckpt.velocity) || !ckpt.params.all_finite() || !ckpt.velocity.all_finite() {
            return Err(corrupt("parameter and velocity tensors are inconsistent or non-finite".into()));
        }
        Ok(ckpt)
    }
}

fn scalar_name<T>() -> String {
    std::any::type_name::<T>().to_string()
}
