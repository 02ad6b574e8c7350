use crate::features::FeatureError;
use crate::ot::OtError;
use crate::pipeline::ConfigError;
use crate::predictor::PredictError;
use crate::prompting::PromptError;
use crate::stain::StainError;

/// Any failure raised by the segmentation stages.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("stain: {0}")]
    Stain(#[from] StainError),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("transport: {0}")]
    Transport(#[from] OtError),
    #[error("prompting: {0}")]
    Prompting(#[from] PromptError),
    #[error("predictor: {0}")]
    Predictor(#[from] PredictError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
