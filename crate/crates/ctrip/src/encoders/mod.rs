//! Per-modality transformer encoders with lightweight decoders for masked
//! reconstruction, plus the Stage-I pretraining loop.

mod augment;
mod checkpoint;
mod model;
mod train;

pub use augment::augment_stack;
pub use checkpoint::{fingerprint, load_mae, load_modality_encoder, save_mae,
    save_modality_encoder, CheckpointMeta};
pub(crate) use checkpoint::{read_weights, write_weights};
pub use model::{
    mae_loss_dense, mae_loss_tabular, Decoder, DecoderCache, DecoderHead, EncodeCache, Encoder,
    EncoderOutput, MaskedAutoencoder, ModalityEncoder, Reconstruction,
};
pub use train::{pretrain_stage1, CurvePoint, Stage1Report, TrainHparams};
pub(crate) use train::{grad_store, parallel_loss_grads};

use serde::{Deserialize, Serialize};

use crate::data_model::{Modality, TabularSchema, ECG_LEADS, ECG_SECONDS, IMG_SIZE, SLICES};
use crate::{Error, Result};

/// Architecture of one modality's masked autoencoder.
///
/// `patch_size` is the square image patch edge for the localizer/CMR
/// encoder and the 1D window length for the ECG encoder; unused for
/// tabular, whose tokens come from the feature tokenizer at `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub mask_ratio: f64,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub num_positions: usize,
    pub token_dim: usize,
}

impl EncoderConfig {
    /// Reference-scale defaults: L 768-dim 12 blocks / 12 heads, E and T
    /// 384-dim 6 blocks / 6 heads, decoders 2 blocks at half width.
    pub fn reference(modality: Modality) -> Self {
        match modality {
            Modality::Localizer => EncoderConfig {
                modality,
                embed_dim: 768,
                depth: 12,
                num_heads: 12,
                decoder_dim: 384,
                decoder_depth: 2,
                mask_ratio: 0.75,
                mlp_ratio: 4,
                patch_size: 16,
                num_positions: (IMG_SIZE / 16) * (IMG_SIZE / 16),
                token_dim: 16 * 16 * SLICES,
            },
            Modality::Ecg => EncoderConfig {
                modality,
                embed_dim: 384,
                depth: 6,
                num_heads: 6,
                decoder_dim: 192,
                decoder_depth: 2,
                mask_ratio: 0.75,
                mlp_ratio: 4,
                patch_size: 100,
                num_positions: ECG_LEADS * (ECG_SECONDS * 500 / 100),
                token_dim: 100,
            },
            Modality::Tabular => EncoderConfig {
                modality,
                embed_dim: 384,
                depth: 6,
                num_heads: 6,
                decoder_dim: 192,
                decoder_depth: 2,
                mask_ratio: 0.75,
                mlp_ratio: 4,
                patch_size: 0,
                num_positions: 15,
                token_dim: 384,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.decoder_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by num_heads {}",
                self.decoder_dim, self.num_heads
            )));
        }
        if self.decoder_depth >= self.depth {
            return Err(Error::Config(format!(
                "decoder_depth {} must be < encoder depth {} (lightweight decoder)",
                self.decoder_depth, self.depth
            )));
        }
        if !(0.0 < self.mask_ratio && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        match self.modality {
            Modality::Localizer => {
                if self.patch_size == 0 || IMG_SIZE % self.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "image patch size {} must divide {IMG_SIZE}",
                        self.patch_size
                    )));
                }
                if self.token_dim != self.patch_size * self.patch_size * SLICES {
                    return Err(Error::Config(format!(
                        "token_dim {} != patch {}² x {SLICES}",
                        self.token_dim, self.patch_size
                    )));
                }
                let grid = IMG_SIZE / self.patch_size;
                if self.num_positions != grid * grid {
                    return Err(Error::Config(format!(
                        "num_positions {} != {}² for patch {}",
                        self.num_positions, grid, self.patch_size
                    )));
                }
            }
            Modality::Ecg => {
                let timesteps = ECG_SECONDS * 500;
                if self.patch_size == 0 || timesteps % self.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "ecg patch length {} must divide {timesteps}",
                        self.patch_size
                    )));
                }
                if self.num_positions != ECG_LEADS * timesteps / self.patch_size {
                    return Err(Error::Config("num_positions inconsistent with patch length".into()));
                }
                if self.token_dim != self.patch_size {
                    return Err(Error::Config("ecg token_dim must equal patch length".into()));
                }
            }
            Modality::Tabular => {
                if self.token_dim != self.embed_dim {
                    return Err(Error::Config(
                        "tabular tokens come from the feature tokenizer at embed_dim".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks the tabular position count against a schema's feature count.
    pub fn validate_against_schema(&self, schema: &TabularSchema) -> Result<()> {
        self.validate()?;
        if self.modality == Modality::Tabular {
            let features = schema.numeric.len() + schema.categorical.len();
            if self.num_positions != features {
                return Err(Error::Config(format!(
                    "tabular encoder has {} positions, schema defines {features} features",
                    self.num_positions
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configs_are_valid() {
        for modality in [Modality::Localizer, Modality::Ecg, Modality::Tabular] {
            EncoderConfig::reference(modality).validate().unwrap();
        }
        assert_eq!(EncoderConfig::reference(Modality::Localizer).token_dim, 768);
        assert_eq!(EncoderConfig::reference(Modality::Ecg).num_positions, 600);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = EncoderConfig::reference(Modality::Localizer);
        cfg.num_heads = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = EncoderConfig::reference(Modality::Localizer);
        cfg.decoder_depth = cfg.depth;
        assert!(cfg.validate().is_err(), "decoder must stay lighter than the encoder");

        let mut cfg = EncoderConfig::reference(Modality::Ecg);
        cfg.patch_size = 300;
        assert!(cfg.validate().is_err());
    }
}
