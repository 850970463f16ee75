//! Stage III: phenotype regression from a single modality, with
//! differential learning rates for head vs pre-trained encoder and nested
//! low-data subsampling.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::train::{backward_cls, encode_cls_cached};
use crate::data_model::{
    Cohort, ImageStack, Modality, PhenotypeVector, Split, SubjectRecord, TabularSchema,
    PHENOTYPE_COUNT,
};
use crate::encoders::{parallel_loss_grads, CurvePoint, ModalityEncoder};
use crate::nn::{cosine_lr, gelu, gelu_grad, AdamW, Linear, Params};
use crate::patching;
use crate::{Error, Result};

pub const HEAD_HIDDEN: usize = 256;

/// Two-layer MLP head with per-phenotype denormalization constants
/// (means/stds of the fine-tuning subset's targets).
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
}

impl RegressionHead {
    pub fn new(in_dim: usize, stats: &[(f64, f64)], rng: &mut impl rand::Rng) -> Self {
        assert_eq!(stats.len(), PHENOTYPE_COUNT);
        RegressionHead {
            fc1: Linear::new(in_dim, HEAD_HIDDEN, rng),
            fc2: Linear::new(HEAD_HIDDEN, PHENOTYPE_COUNT, rng),
            target_means: stats.iter().map(|s| s.0).collect(),
            target_stds: stats.iter().map(|s| s.1.max(1e-6)).collect(),
        }
    }

    /// Normalized-space predictions for one embedding row.
    fn forward(&self, cls: &Array1<f64>) -> (Array1<f64>, HeadCache) {
        let x = cls.clone().insert_axis(ndarray::Axis(0));
        let pre = self.fc1.forward(&x);
        let act = pre.mapv(gelu);
        let out = self.fc2.forward(&act);
        (out.row(0).to_owned(), HeadCache { x, pre, act })
    }

    fn backward(
        &self,
        cache: &HeadCache,
        d_out: &Array1<f64>,
        g: &mut RegressionHead,
    ) -> Array1<f64> {
        let d_out2 = d_out.clone().insert_axis(ndarray::Axis(0));
        let d_act = self.fc2.backward(&cache.act, &d_out2, &mut g.fc2);
        let d_pre = &d_act * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(&cache.x, &d_pre, &mut g.fc1).row(0).to_owned()
    }

    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.target_means.iter().zip(&self.target_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.target_means.iter().zip(&self.target_stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

struct HeadCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Params for RegressionHead {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Which data feeds the regressor; `Cmr` reuses the image encoder
/// architecture on the cine stand-in stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionInput {
    Localizer,
    Cmr,
    Ecg,
    Tabular,
}

impl RegressionInput {
    pub fn modality(self) -> Modality {
        match self {
            RegressionInput::Localizer | RegressionInput::Cmr => Modality::Localizer,
            RegressionInput::Ecg => Modality::Ecg,
            RegressionInput::Tabular => Modality::Tabular,
        }
    }
}

/// Stage-III fine-tuning settings. `lr_encoder` defaults to a tenth of the
/// head rate to preserve pre-trained representations; supervised-baseline
/// runs raise it to the head rate (nothing to preserve) and 0 freezes the
/// encoder entirely (linear-probe mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub data_fraction: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Validation cadence in epochs; early-stopping patience is counted in
    /// validation evaluations.
    pub val_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            data_fraction: 1.0,
            lr_head: 1e-3,
            lr_encoder: 1e-4,
            epochs: 100,
            batch_size: 256,
            weight_decay: 0.01,
            val_every: 1,
            patience: 20,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            )));
        }
        Ok(())
    }
}

/// Uniform subject-level subsample of `ceil(fraction * n_train)` training
/// ids, deterministic in `seed` and nested: the sample at a smaller
/// fraction is a prefix of the sample at a larger one for the same seed.
pub fn subsample_training(cohort: &Cohort, fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut ids: Vec<String> =
        cohort.split_ids(Split::Train).into_iter().map(str::to_string).collect();
    if ids.is_empty() {
        return Err(Error::Config("cohort has no training split".into()));
    }
    ids.sort();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(31);
    ids.shuffle(&mut rng);
    let k = (fraction * ids.len() as f64).ceil() as usize;
    ids.truncate(k.max(1));
    Ok(ids)
}

/// Encoder plus regression head; prediction consumes only the configured
/// input modality.
#[derive(Debug, Clone)]
pub struct TrainedRegressor {
    pub encoder: ModalityEncoder,
    pub head: RegressionHead,
    pub input: RegressionInput,
}

impl Params for TrainedRegressor {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

impl TrainedRegressor {
    /// Normalized-space MSE for one subject; gradients optional.
    fn sample_loss(
        &self,
        subject: &SubjectRecord,
        schema: &TabularSchema,
        targets_norm: &[f64],
        mut g: Option<&mut TrainedRegressor>,
    ) -> Result<f64> {
        let use_cmr = self.input == RegressionInput::Cmr;
        let (cls, ctx) = encode_cls_cached(&self.encoder, subject, schema, use_cmr)?;
        let (pred, head_cache) = self.head.forward(&cls);
        let n = PHENOTYPE_COUNT as f64;
        let mut loss = 0.0;
        let mut d_pred = Array1::zeros(PHENOTYPE_COUNT);
        for k in 0..PHENOTYPE_COUNT {
            let diff = pred[k] - targets_norm[k];
            loss += diff * diff / n;
            d_pred[k] = 2.0 * diff / n;
        }
        if let Some(g) = g.as_deref_mut() {
            let d_cls = self.head.backward(&head_cache, &d_pred, &mut g.head);
            backward_cls(&self.encoder, &ctx, &d_cls, &mut g.encoder);
        }
        Ok(loss)
    }

    /// Deterministic physical-unit phenotype prediction from an image
    /// stack (localizer-only inference path).
    pub fn predict_phenotypes(&self, stack: &ImageStack) -> Result<PhenotypeVector> {
        if self.input != RegressionInput::Localizer && self.input != RegressionInput::Cmr {
            return Err(Error::Invalid(format!(
                "regressor consumes {:?}, not image stacks",
                self.input
            )));
        }
        let seq = patching::patchify_image(stack, self.encoder.encoder.cfg.patch_size)?;
        let (out, _) = self.encoder.encoder.encode(&seq, None)?;
        let (pred, _) = self.head.forward(&out.cls);
        PhenotypeVector::validated(self.head.denormalize(&pred.to_vec()))
    }

    /// Prediction for a full record through whichever modality this
    /// regressor was trained on.
    pub fn predict_subject(
        &self,
        subject: &SubjectRecord,
        schema: &TabularSchema,
    ) -> Result<PhenotypeVector> {
        let use_cmr = self.input == RegressionInput::Cmr;
        let subject = prepared_subject(subject, self.input)?;
        let (cls, _) = encode_cls_cached(&self.encoder, &subject, schema, use_cmr)?;
        let (pred, _) = self.head.forward(&cls);
        PhenotypeVector::validated(self.head.denormalize(&pred.to_vec()))
    }
}

/// Drift-corrects the ECG when the regressor consumes it.
fn prepared_subject(subject: &SubjectRecord, input: RegressionInput) -> Result<SubjectRecord> {
    let mut s = subject.clone();
    if input == RegressionInput::Ecg {
        let ecg = s.ecg()?;
        if !ecg.drift_corrected {
            s.ecg = Some(patching::correct_baseline_drift(ecg));
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Report {
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub subset_ids: Vec<String>,
}

/// Trains a regression head (and optionally the encoder) on the given
/// subject subset. The generic path behind both Stage-III fine-tuning and
/// the supervised baselines.
pub fn train_regressor(
    cohort: &Cohort,
    encoder: ModalityEncoder,
    input: RegressionInput,
    cfg: &FinetuneConfig,
    curve_path: Option<&Path>,
) -> Result<(TrainedRegressor, Stage3Report)> {
    cfg.validate()?;
    if input.modality() != encoder.modality() {
        return Err(Error::Config(format!(
            "{input:?} input cannot feed a {:?} encoder",
            encoder.modality()
        )));
    }
    let subset_ids = subsample_training(cohort, cfg.data_fraction, cfg.seed)?;
    let train: Vec<&SubjectRecord> =
        subset_ids.iter().map(|id| cohort.subject(id).expect("subset from cohort")).collect();
    let val = cohort.split_subjects(Split::Val);
    if val.is_empty() {
        return Err(Error::Config("cohort needs a validation split".into()));
    }

    // target stats from the actual fine-tuning subset
    let stats: Vec<(f64, f64)> = (0..PHENOTYPE_COUNT)
        .map(|k| {
            let n = train.len() as f64;
            let mean = train.iter().map(|s| s.phenotypes.values[k]).sum::<f64>() / n;
            let var =
                train.iter().map(|s| (s.phenotypes.values[k] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(32);
    let head = RegressionHead::new(encoder.encoder.cfg.embed_dim, &stats, &mut rng);
    let mut model = TrainedRegressor { encoder, head, input };

    let prep = |subjects: &[&SubjectRecord]| -> Result<Vec<(SubjectRecord, Vec<f64>)>> {
        subjects
            .par_iter()
            .map(|s| {
                let prepared = prepared_subject(s, input)?;
                let targets = model.head.normalize(&s.phenotypes.values);
                Ok((prepared, targets))
            })
            .collect()
    };
    let train_data = prep(&train)?;
    let val_data = prep(&val)?;

    let eval = |model: &TrainedRegressor, data: &[(SubjectRecord, Vec<f64>)]| -> Result<f64> {
        let losses: Result<Vec<f64>> = data
            .par_iter()
            .map(|(s, t)| model.sample_loss(s, &cohort.schema, t, None))
            .collect();
        Ok(losses?.iter().sum::<f64>() / data.len() as f64)
    };

    let mut head_opt = AdamW::new(cfg.weight_decay);
    let mut enc_opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;

    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&(SubjectRecord, Vec<f64>)> =
                batch_ids.iter().map(|&i| &train_data[i]).collect();
            let (loss_sum, grads) = parallel_loss_grads(&model, &batch, |m, (s, t), g| {
                m.sample_loss(s, &cohort.schema, t, Some(g))
            })?;
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!("stage3 epoch {epoch}: non-finite loss")));
            }
            epoch_loss += loss_sum;

            let mut mean_grads = grads;
            for p in mean_grads.params_mut() {
                for v in p {
                    *v /= batch.len() as f64;
                }
            }
            let lr_h = cosine_lr(step, total_steps, cfg.lr_head, cfg.lr_head * 0.01);
            head_opt.step(&mut model.head, &mean_grads.head, lr_h);
            if cfg.lr_encoder > 0.0 {
                let lr_e = cosine_lr(step, total_steps, cfg.lr_encoder, cfg.lr_encoder * 0.01);
                enc_opt.step(&mut model.encoder, &mean_grads.encoder, lr_e);
            }
            step += 1;
        }
        let train_loss = epoch_loss / train_data.len() as f64;

        if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let val_loss = eval(&model, &val_data)?;
            curve.push(CurvePoint { epoch, train_loss, val_loss });
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_model = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        } else {
            curve.push(CurvePoint { epoch, train_loss, val_loss: f64::NAN });
        }
    }

    if let Some(path) = curve_path {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for p in &curve {
            out.push_str(&format!("{},{},{}\n", p.epoch, p.train_loss, p.val_loss));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }

    let report = Stage3Report { curve, best_epoch, best_val_loss: best_val, subset_ids };
    Ok((best_model, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegressorMeta {
    fingerprint: String,
    config: crate::encoders::EncoderConfig,
    input: String,
    target_means: Vec<f64>,
    target_stds: Vec<f64>,
}

/// Writes `<base>.bin` (encoder + head weights) and `<base>.json`.
pub fn save_regressor(
    base: &Path,
    model: &TrainedRegressor,
    schema: &TabularSchema,
) -> Result<()> {
    let cfg = &model.encoder.encoder.cfg;
    let uses_schema = cfg.modality == Modality::Tabular;
    let meta = RegressorMeta {
        fingerprint: crate::encoders::fingerprint(cfg, uses_schema.then_some(schema)),
        config: cfg.clone(),
        input: format!("{:?}", model.input),
        target_means: model.head.target_means.clone(),
        target_stds: model.head.target_stds.clone(),
    };
    crate::encoders::write_weights(&base.with_extension("bin"), model)?;
    crate::data_model::write_json(&base.with_extension("json"), &meta)
}

/// Rebuilds a regressor from its checkpoint; refuses mismatched encoder
/// fingerprints.
pub fn load_regressor(
    base: &Path,
    cfg: &crate::encoders::EncoderConfig,
    schema: Option<&TabularSchema>,
    input: RegressionInput,
) -> Result<TrainedRegressor> {
    let meta: RegressorMeta = crate::data_model::read_json(&base.with_extension("json"))?;
    let expected = crate::encoders::fingerprint(cfg, schema);
    if meta.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: meta.fingerprint });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let encoder = ModalityEncoder::new(cfg, schema, &mut rng);
    let stats: Vec<(f64, f64)> =
        meta.target_means.iter().zip(&meta.target_stds).map(|(&m, &s)| (m, s)).collect();
    let head = RegressionHead::new(cfg.embed_dim, &stats, &mut rng);
    let mut model = TrainedRegressor { encoder, head, input };
    crate::encoders::read_weights(&base.with_extension("bin"), &mut model)?;
    Ok(model)
}

/// Stage-III entry point: fine-tunes a pre-trained localizer encoder plus
/// a fresh head; only localizer inputs are consumed.
pub fn finetune_stage3(
    encoder: ModalityEncoder,
    cohort: &Cohort,
    cfg: &FinetuneConfig,
    curve_path: Option<&Path>,
) -> Result<(TrainedRegressor, Stage3Report)> {
    if encoder.modality() != Modality::Localizer {
        return Err(Error::Config(
            "stage 3 predicts from localizers; checkpoint must provide a localizer encoder".into(),
        ));
    }
    train_regressor(cohort, encoder, RegressionInput::Localizer, cfg, curve_path)
}
