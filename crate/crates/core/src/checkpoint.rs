//! Saving and loading backbone parameters as `PVT1` files.
//!
//! The file holds tensors only; the matching [`ViTConfig`] travels separately
//! (the run directory's `run.json`).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::{read_tensors, write_tensors, TensorFileError};
use crate::vit::{ParamsError, ViTConfig, ViTParams};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: TensorFileError },
    #[error("{path}: {source}")]
    Params { path: String, source: ParamsError },
}

/// Writes parameters in canonical order (values rounded to 32-bit).
pub fn save_checkpoint<T: Real>(path: &Path, params: &ViTParams<T>) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    write_tensors(&mut bytes, &params.to_stored()).map_err(|source| CheckpointError::Format {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path, config: &ViTConfig) -> Result<ViTParams<T>, CheckpointError> {
    let p = || path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: p(), source })?;
    let stored = read_tensors(&bytes).map_err(|source| CheckpointError::Format { path: p(), source })?;
    ViTParams::from_stored(config, &stored).map_err(|source| CheckpointError::Params { path: p(), source })
}
