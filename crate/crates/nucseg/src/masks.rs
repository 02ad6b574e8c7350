//! Mask files produced by an external promptable segmenter.
//!
//! Each prompt group of an image has `mask_<patch>_<idx>.bin`, an `SPRT`
//! tensor of shape `(patch height, patch width, 1)` holding exactly 0.0 or
//! 1.0, and `mask_<patch>_<idx>.json` holding `{"score": <float>}`. The files
//! of image `id` live in `<root>/<id>/`.

use std::path::{Path, PathBuf};

use nucseg_core::predictor::{LocalPrompt, MaskPredictor, PatchMask, PatchView, PredictError};
use nucseg_core::{BinaryMask, Grid};
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sidecar(#[from] IoError),
    #[error("{path}: mask tensor must have depth 1, got {d}")]
    Depth { path: String, d: usize },
    #[error("{path}: mask value {value} at index {index} is neither 0 nor 1")]
    Value { path: String, index: usize, value: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub score: f64,
}

pub fn file_stem(patch: usize, index: usize) -> String {
    format!("mask_{patch}_{index}")
}

pub fn write_mask(dir: &Path, patch: usize, index: usize, mask: &BinaryMask, score: f64) -> Result<(), MaskError> {
    let stem = file_stem(patch, index);
    let data = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(mask.height(), mask.width(), 1, data)?.write(&dir.join(format!("{stem}.bin")))?;
    io::write_json(&dir.join(format!("{stem}.json")), &Sidecar { score })?;
    Ok(())
}

pub fn read_mask(dir: &Path, patch: usize, index: usize) -> Result<PatchMask, MaskError> {
    let stem = file_stem(patch, index);
    let bin = dir.join(format!("{stem}.bin"));
    let t = Tensor::read(&bin)?;
    if t.d != 1 {
        return Err(MaskError::Depth { path: bin.display().to_string(), d: t.d });
    }
    let mut bits = Vec::with_capacity(t.data.len());
    for (index, &value) in t.data.iter().enumerate() {
        if value == 1.0 {
            bits.push(true);
        } else if value == 0.0 {
            bits.push(false);
        } else {
            return Err(MaskError::Value { path: bin.display().to_string(), index, value });
        }
    }
    let sidecar: Sidecar = io::read_json(&dir.join(format!("{stem}.json")))?;
    Ok(PatchMask { mask: Grid::from_vec(t.h, t.w, bits), score: sidecar.score })
}

/// Serves masks from files keyed by image id, patch index and prompt index.
#[derive(Debug, Clone)]
pub struct FileMaskPredictor {
    pub root: PathBuf,
}

impl FileMaskPredictor {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl MaskPredictor for FileMaskPredictor {
    fn predict(&self, patch: &PatchView<'_>, prompt: &LocalPrompt) -> Result<PatchMask, PredictError> {
        read_mask(&self.root.join(patch.image_id), patch.rect.index, prompt.index)
            .map_err(|e| PredictError::Backend(e.to_string()))
    }
}
