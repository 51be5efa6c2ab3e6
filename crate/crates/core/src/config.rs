//! Merged run configuration. Defaults reproduce the reference hyperparameters.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::identify::IdentifyConfig;
use crate::loss::LossConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub identify: IdentifyConfig,
}

impl RunConfig {
    /// Reduced encoder for desk-scale runs; every other value keeps its default.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig::tiny();
        Self {
            augmentation: AugmentationConfig {
                input_dim: encoder.input_dim,
                ..Default::default()
            },
            encoder,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augmentation.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.identify.validate()
    }
}
