use std::path::PathBuf;

use nucseg::masks;
use nucseg_core::predictor::{LocalPrompt, MaskPredictor, OraclePredictor, PatchMask, PatchView, PredictError};

/// Runs the oracle and exports every mask it predicts in the interchange
/// layout, the way an external segmenter would.
pub struct Exporter {
    pub root: PathBuf,
}

impl MaskPredictor for Exporter {
    fn predict(&self, patch: &PatchView<'_>, prompt: &LocalPrompt) -> Result<PatchMask, PredictError> {
        let out = OraclePredictor::default().predict(patch, prompt)?;
        let dir = self.root.join(patch.image_id);
        std::fs::create_dir_all(&dir).unwrap();
        masks::write_mask(&dir, patch.rect.index, prompt.index, &out.mask, out.score).unwrap();
        Ok(out)
    }
}
