use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{MaskedAutoencoder, ModalityEncoder};
use super::EncoderConfig;
use crate::data_model::{read_json, write_json, TabularSchema};
use crate::nn::Params;
use crate::{Error, Result};

/// JSON sidecar stored next to every weights blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub fingerprint: String,
    pub config: EncoderConfig,
    pub epochs_run: usize,
    #[serde(default)]
    pub final_train_loss: Option<f64>,
    #[serde(default)]
    pub final_val_loss: Option<f64>,
    pub seed: u64,
}

/// SHA-256 over the canonical JSON of the encoder config plus (for
/// tabular) the schema; loading refuses a mismatched fingerprint.
pub fn fingerprint(cfg: &EncoderConfig, schema: Option<&TabularSchema>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
    match schema {
        Some(s) => hasher.update(serde_json::to_vec(s).expect("schema serializes")),
        None => hasher.update(b"no-schema"),
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_weights(path: &Path, model: &impl Params) -> Result<()> {
    let flat = model.flat();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_weights(path: &Path, model: &mut impl Params) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != model.n_params() * 8 {
        return Err(Error::Shape(format!(
            "{path:?}: blob holds {} params, model expects {}",
            bytes.len() / 8,
            model.n_params()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    model.set_flat(&flat)
}

/// Writes `<base>.bin` (flat little-endian f64 weights) and `<base>.json`.
pub fn save_mae(base: &Path, model: &MaskedAutoencoder, meta: &CheckpointMeta) -> Result<()> {
    write_weights(&base.with_extension("bin"), model)?;
    write_json(&base.with_extension("json"), meta)
}

/// Rebuilds the model from `cfg` and fills the stored weights; refuses a
/// fingerprint mismatch between the sidecar and `(cfg, schema)`.
pub fn load_mae(
    base: &Path,
    cfg: &EncoderConfig,
    schema: Option<&TabularSchema>,
) -> Result<(MaskedAutoencoder, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&base.with_extension("json"))?;
    let expected = fingerprint(cfg, schema);
    if meta.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: meta.fingerprint });
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let mut model = MaskedAutoencoder::new(cfg, schema, &mut rng);
    read_weights(&base.with_extension("bin"), &mut model)?;
    Ok((model, meta))
}

/// Encoder-only variant used inside Stage-II checkpoints.
pub fn save_modality_encoder(
    base: &Path,
    model: &ModalityEncoder,
    meta: &CheckpointMeta,
) -> Result<()> {
    write_weights(&base.with_extension("bin"), model)?;
    write_json(&base.with_extension("json"), meta)
}

pub fn load_modality_encoder(
    base: &Path,
    cfg: &EncoderConfig,
    schema: Option<&TabularSchema>,
) -> Result<(ModalityEncoder, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&base.with_extension("json"))?;
    let expected = fingerprint(cfg, schema);
    if meta.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: meta.fingerprint });
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let mut model = ModalityEncoder::new(cfg, schema, &mut rng);
    read_weights(&base.with_extension("bin"), &mut model)?;
    Ok((model, meta))
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Modality;
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            modality: Modality::Ecg,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            patch_size: 10,
            num_positions: 8,
            token_dim: 10,
        }
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint_refusal() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let model = MaskedAutoencoder::new(&cfg, None, &mut rng);
        let meta = CheckpointMeta {
            stage: "stage1".into(),
            fingerprint: fingerprint(&cfg, None),
            config: cfg.clone(),
            epochs_run: 5,
            final_train_loss: Some(0.5),
            final_val_loss: Some(0.6),
            seed: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("stage1_E");
        save_mae(&base, &model, &meta).unwrap();

        let (loaded, loaded_meta) = load_mae(&base, &cfg, None).unwrap();
        assert_eq!(loaded.flat(), model.flat());
        assert_eq!(loaded_meta.epochs_run, 5);

        // a different config must be refused
        let mut other = cfg.clone();
        other.embed_dim = 32;
        other.decoder_dim = 16;
        match load_mae(&base, &other, None) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }
}
