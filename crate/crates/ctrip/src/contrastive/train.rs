use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ProjectionHead, TemperaturePair, TAU_LE_INIT, TAU_LT_INIT};
use crate::data_model::{
    read_json, write_json, Cohort, EcgRecord, Modality, Split, SubjectRecord, TabularSchema,
};
use crate::encoders::{
    fingerprint, load_modality_encoder, save_modality_encoder, CheckpointMeta, EncodeCache,
    EncoderConfig, ModalityEncoder,
};
use crate::nn::Params;
use crate::patching::{self, TokenSequence};
use crate::{Error, Result};

/// Stage-II optimization settings; the reference recipe is 150 epochs at
/// batch size 256 with the stated temperature initializations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Hparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train only projections and temperatures, keeping encoders fixed.
    pub freeze_encoders: bool,
    pub tau_le_init: f64,
    pub tau_lt_init: f64,
    /// Active alignment edges; the full tri-modal objective uses both,
    /// bimodal ablations exactly one.
    pub pair_le: bool,
    pub pair_lt: bool,
}

impl Default for Stage2Hparams {
    fn default() -> Self {
        Stage2Hparams {
            epochs: 150,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            freeze_encoders: false,
            tau_le_init: TAU_LE_INIT,
            tau_lt_init: TAU_LT_INIT,
            pair_le: true,
            pair_lt: true,
        }
    }
}

/// Three encoders, three projection heads and the learnable temperatures.
#[derive(Debug, Clone)]
pub struct AlignmentModel {
    pub enc_l: ModalityEncoder,
    pub enc_e: ModalityEncoder,
    pub enc_t: ModalityEncoder,
    pub proj_l: ProjectionHead,
    pub proj_e: ProjectionHead,
    pub proj_t: ProjectionHead,
    pub temps: TemperaturePair,
}

impl Params for AlignmentModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.enc_l.params();
        v.extend(self.enc_e.params());
        v.extend(self.enc_t.params());
        v.extend(self.proj_l.params());
        v.extend(self.proj_e.params());
        v.extend(self.proj_t.params());
        v.extend(self.temps.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.enc_l.params_mut();
        v.extend(self.enc_e.params_mut());
        v.extend(self.enc_t.params_mut());
        v.extend(self.proj_l.params_mut());
        v.extend(self.proj_e.params_mut());
        v.extend(self.proj_t.params_mut());
        v.extend(self.temps.params_mut());
        v
    }
}

/// Per-subject shared 256-dim projections; a component is `None` when the
/// modality is missing from the record.
#[derive(Debug, Clone)]
pub struct AlignedEmbedding {
    pub subject_id: String,
    pub z_l: Option<Array1<f64>>,
    pub z_e: Option<Array1<f64>>,
    pub z_t: Option<Array1<f64>>,
}

/// Full-sequence [CLS] embedding (pre-projection) for one record's
/// modality; ECG records are drift-corrected on the fly if needed.
pub(crate) fn encode_cls(
    enc: &ModalityEncoder,
    subject: &SubjectRecord,
    schema: &TabularSchema,
) -> Result<Array1<f64>> {
    let (out, _) = encode_cls_cached(enc, subject, schema, false)?;
    Ok(out)
}

pub(crate) struct ClsContext {
    pub cache: EncodeCache,
    pub tokenizer_cache: Option<crate::nn::TokenizerCache>,
    pub num_tokens: usize,
}

/// `use_cmr` substitutes the optional cine stand-in stack for the
/// localizer (the CMR-supervised baseline's input path).
pub(crate) fn encode_cls_cached(
    enc: &ModalityEncoder,
    subject: &SubjectRecord,
    schema: &TabularSchema,
    use_cmr: bool,
) -> Result<(Array1<f64>, ClsContext)> {
    let cfg = &enc.encoder.cfg;
    let (seq, tok_cache): (TokenSequence, Option<crate::nn::TokenizerCache>) = match cfg.modality
    {
        Modality::Localizer => {
            let stack = if use_cmr { subject.cmr()? } else { subject.localizer()? };
            (patching::patchify_image(stack, cfg.patch_size)?, None)
        }
        Modality::Ecg => {
            let ecg = subject.ecg()?;
            let corrected: EcgRecord;
            let source = if ecg.drift_corrected {
                ecg
            } else {
                corrected = patching::correct_baseline_drift(ecg);
                &corrected
            };
            (patching::patchify_ecg(source, cfg.patch_size)?, None)
        }
        Modality::Tabular => {
            let tokenizer = enc.tokenizer.as_ref().expect("tabular encoder has tokenizer");
            let (seq, cache) = patching::tokenize_tabular(
                subject.tabular()?,
                Some(&subject.phenotypes),
                schema,
                tokenizer,
            )?;
            (seq, Some(cache))
        }
    };
    let num_tokens = seq.num_tokens();
    let (out, cache) = enc.encoder.encode(&seq, None)?;
    Ok((out.cls, ClsContext { cache, tokenizer_cache: tok_cache, num_tokens }))
}

/// Backward from a [CLS] gradient into encoder (and tokenizer) grads.
pub(crate) fn backward_cls(
    enc: &ModalityEncoder,
    ctx: &ClsContext,
    d_cls: &Array1<f64>,
    g: &mut ModalityEncoder,
) {
    let embed = enc.encoder.cfg.embed_dim;
    let mut d_out = Array2::zeros((ctx.num_tokens + 1, embed));
    d_out.row_mut(0).assign(d_cls);
    let d_tokens = enc.encoder.backward(&ctx.cache, &d_out, &mut g.encoder);
    if let (Some(tokenizer), Some(cache)) = (&enc.tokenizer, &ctx.tokenizer_cache) {
        tokenizer.backward(cache, &d_tokens, g.tokenizer.as_mut().expect("grad store matches"));
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Point {
    pub epoch: usize,
    pub total_loss: f64,
    pub loss_le: f64,
    pub loss_lt: f64,
    pub tau_le: f64,
    pub tau_lt: f64,
    pub pos_sim_le: f64,
    pub neg_sim_le: f64,
    pub pos_sim_lt: f64,
    pub neg_sim_lt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Report {
    pub curve: Vec<Stage2Point>,
    pub val_pos_sim_le: f64,
    pub val_neg_sim_le: f64,
    pub val_pos_sim_lt: f64,
    pub val_neg_sim_lt: f64,
}

struct PreparedSubject {
    cohort_index: usize,
    ecg: Option<EcgRecord>,
}

/// Jointly fine-tunes the three encoders, projection heads and pair
/// temperatures on full (unmasked) sequences by minimizing the total
/// localizer-centric objective. Emits `stage2_curve.csv` when an output
/// directory is given.
pub fn align_stage2(
    cohort: &Cohort,
    enc_l: ModalityEncoder,
    enc_e: ModalityEncoder,
    enc_t: ModalityEncoder,
    hp: &Stage2Hparams,
    out_dir: Option<&Path>,
) -> Result<(AlignmentModel, Stage2Report)> {
    if !hp.pair_le && !hp.pair_lt {
        return Err(Error::Config("stage 2 needs at least one alignment pair".into()));
    }
    enc_t.encoder.cfg.validate_against_schema(&cohort.schema)?;
    let train_ids: Vec<usize> = indices_of(cohort, Split::Train);
    let val_ids: Vec<usize> = indices_of(cohort, Split::Val);
    if train_ids.len() < 2 || val_ids.len() < 2 {
        return Err(Error::Config("stage 2 needs >= 2 train and val subjects".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(hp.seed);
    rng.set_stream(20);
    let mut model = AlignmentModel {
        proj_l: ProjectionHead::new(enc_l.encoder.cfg.embed_dim, &mut rng),
        proj_e: ProjectionHead::new(enc_e.encoder.cfg.embed_dim, &mut rng),
        proj_t: ProjectionHead::new(enc_t.encoder.cfg.embed_dim, &mut rng),
        temps: TemperaturePair::new(hp.tau_le_init, hp.tau_lt_init)?,
        enc_l,
        enc_e,
        enc_t,
    };

    // drift-correct every ECG once up front (only when the L-E edge is on)
    let use_ecg = hp.pair_le;
    let prepare = |ids: &[usize]| -> Result<Vec<PreparedSubject>> {
        ids.par_iter()
            .map(|&i| {
                let ecg = if use_ecg {
                    let ecg = cohort.subjects[i].ecg()?;
                    Some(if ecg.drift_corrected {
                        ecg.clone()
                    } else {
                        patching::correct_baseline_drift(ecg)
                    })
                } else {
                    None
                };
                Ok(PreparedSubject { cohort_index: i, ecg })
            })
            .collect()
    };
    let train_prep = prepare(&train_ids)?;
    let val_prep = prepare(&val_ids)?;

    let mut weight_opt = crate::nn::AdamW::new(hp.weight_decay);
    let mut temp_opt = crate::nn::AdamW::new(0.0);
    let total_steps = hp.epochs * train_prep.len().div_ceil(hp.batch_size);
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..train_prep.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0); // total, le, lt
        let mut batches = 0usize;
        for batch_ids in order.chunks(hp.batch_size) {
            if batch_ids.len() < 2 {
                continue; // InfoNCE needs in-batch negatives
            }
            let batch: Vec<&PreparedSubject> =
                batch_ids.iter().map(|&i| &train_prep[i]).collect();

            let (value, grads) =
                alignment_step(&model, cohort, &batch, hp.freeze_encoders, (hp.pair_le, hp.pair_lt))?;
            if !value.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage2 epoch {epoch}: non-finite loss"
                )));
            }
            sums.0 += value.total;
            sums.1 += value.loss_le;
            sums.2 += value.loss_lt;
            batches += 1;

            let lr = crate::nn::cosine_lr(step, total_steps, hp.lr, hp.lr * 0.01);
            let (mut wp, wg) = weight_group(&mut model, &grads, hp.freeze_encoders);
            weight_opt.step_slices(&mut wp, &wg, lr);
            temp_opt.step(&mut model.temps, &grads.temps, lr);
            model.temps.clamp();
            debug_assert!(
                model.temps.tau_le() >= super::TAU_MIN - 1e-12
                    && model.temps.tau_le() <= super::TAU_MAX + 1e-12
                    && model.temps.tau_lt() >= super::TAU_MIN - 1e-12
                    && model.temps.tau_lt() <= super::TAU_MAX + 1e-12
            );
            step += 1;
        }

        let stats = embedding_stats(&model, cohort, &val_prep, (hp.pair_le, hp.pair_lt))?;
        curve.push(Stage2Point {
            epoch,
            total_loss: sums.0 / batches as f64,
            loss_le: sums.1 / batches as f64,
            loss_lt: sums.2 / batches as f64,
            tau_le: model.temps.tau_le(),
            tau_lt: model.temps.tau_lt(),
            pos_sim_le: stats.0,
            neg_sim_le: stats.1,
            pos_sim_lt: stats.2,
            neg_sim_lt: stats.3,
        });
    }

    if let Some(dir) = out_dir {
        write_stage2_csv(&curve, &dir.join("stage2_curve.csv"))?;
    }
    let last = embedding_stats(&model, cohort, &val_prep, (hp.pair_le, hp.pair_lt))?;
    let report = Stage2Report {
        curve,
        val_pos_sim_le: last.0,
        val_neg_sim_le: last.1,
        val_pos_sim_lt: last.2,
        val_neg_sim_lt: last.3,
    };
    Ok((model, report))
}

fn indices_of(cohort: &Cohort, split: Split) -> Vec<usize> {
    cohort
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Some(split))
        .map(|(i, _)| i)
        .collect()
}

/// One batch: forward all three towers, batch-level loss and gradients,
/// then per-sample backward. Returns the loss parts and a gradient model.
fn alignment_step(
    model: &AlignmentModel,
    cohort: &Cohort,
    batch: &[&PreparedSubject],
    freeze_encoders: bool,
    pairs: (bool, bool),
) -> Result<(super::TotalLossValue, AlignmentModel)> {
    let n = batch.len();
    let schema = &cohort.schema;
    let (use_e, use_t) = pairs;

    // forward pass (no caches kept; recomputed in the backward phase)
    let cls_rows: Result<Vec<(Array1<f64>, Option<Array1<f64>>, Option<Array1<f64>>)>> = batch
        .par_iter()
        .map(|prep| {
            let subject = &cohort.subjects[prep.cohort_index];
            let with_ecg = subject_with_ecg(subject, &prep.ecg);
            let l = encode_cls(&model.enc_l, &with_ecg, schema)?;
            let e = use_e.then(|| encode_cls(&model.enc_e, &with_ecg, schema)).transpose()?;
            let t = use_t.then(|| encode_cls(&model.enc_t, &with_ecg, schema)).transpose()?;
            Ok((l, e, t))
        })
        .collect();
    let cls_rows = cls_rows?;

    let stack = |pick: &dyn Fn(usize) -> Option<Array1<f64>>, dim: usize| {
        let mut m = Array2::zeros((n, dim));
        for i in 0..n {
            if let Some(row) = pick(i) {
                m.row_mut(i).assign(&row);
            }
        }
        m
    };
    let cls_l = stack(&|i| Some(cls_rows[i].0.clone()), model.enc_l.encoder.cfg.embed_dim);
    let cls_e = stack(&|i| cls_rows[i].1.clone(), model.enc_e.encoder.cfg.embed_dim);
    let cls_t = stack(&|i| cls_rows[i].2.clone(), model.enc_t.encoder.cfg.embed_dim);

    let (z_l, cache_l) = model.proj_l.forward(&cls_l);
    let (z_e, cache_e) = model.proj_e.forward(&cls_e);
    let (z_t, cache_t) = model.proj_t.forward(&cls_t);

    let mut grads = crate::encoders::grad_store(model);
    let mut d_zl = Array2::zeros(z_l.raw_dim());
    let mut d_ze = Array2::zeros(z_e.raw_dim());
    let mut d_zt = Array2::zeros(z_t.raw_dim());
    let mut loss_le = f64::NAN;
    let mut loss_lt = f64::NAN;
    let mut active = 0.0;
    let mut total_sum = 0.0;
    if use_e {
        let (l, d_a, d_b, d_log_tau) =
            super::pair_loss_with_grads(&z_l, &z_e, model.temps.tau_le());
        loss_le = l;
        total_sum += l;
        active += 1.0;
        d_zl += &d_a;
        d_ze += &d_b;
        grads.temps.log_tau_le[[0, 0]] = d_log_tau;
    }
    if use_t {
        let (l, d_a, d_b, d_log_tau) =
            super::pair_loss_with_grads(&z_l, &z_t, model.temps.tau_lt());
        loss_lt = l;
        total_sum += l;
        active += 1.0;
        d_zl += &d_a;
        d_zt += &d_b;
        grads.temps.log_tau_lt[[0, 0]] = d_log_tau;
    }
    // mean over active pairs: with both edges this is ½(L_LE + L_LT)
    let scale = 1.0 / active;
    total_sum *= scale;
    d_zl.mapv_inplace(|v| v * scale);
    d_ze.mapv_inplace(|v| v * scale);
    d_zt.mapv_inplace(|v| v * scale);
    for p in grads.temps.params_mut() {
        for v in p {
            *v *= scale;
        }
    }
    let value = super::TotalLossValue { total: total_sum, loss_le, loss_lt };

    let d_cls_l = model.proj_l.backward(&cache_l, &d_zl, &mut grads.proj_l);
    let d_cls_e = model.proj_e.backward(&cache_e, &d_ze, &mut grads.proj_e);
    let d_cls_t = model.proj_t.backward(&cache_t, &d_zt, &mut grads.proj_t);

    if !freeze_encoders {
        // re-forward with caches and backpropagate each sample's CLS grad
        let encoder_grads: Result<Vec<(ModalityEncoder, ModalityEncoder, ModalityEncoder)>> =
            batch
                .par_chunks(4)
                .enumerate()
                .map(|(chunk_idx, chunk)| {
                    let mut gl = crate::encoders::grad_store(&model.enc_l);
                    let mut ge = crate::encoders::grad_store(&model.enc_e);
                    let mut gt = crate::encoders::grad_store(&model.enc_t);
                    for (k, prep) in chunk.iter().enumerate() {
                        let i = chunk_idx * 4 + k;
                        let subject = &cohort.subjects[prep.cohort_index];
                        let with_ecg = subject_with_ecg(subject, &prep.ecg);
                        let (_, ctx) = encode_cls_cached(&model.enc_l, &with_ecg, schema, false)?;
                        backward_cls(&model.enc_l, &ctx, &d_cls_l.row(i).to_owned(), &mut gl);
                        if use_e {
                            let (_, ctx) =
                                encode_cls_cached(&model.enc_e, &with_ecg, schema, false)?;
                            backward_cls(&model.enc_e, &ctx, &d_cls_e.row(i).to_owned(), &mut ge);
                        }
                        if use_t {
                            let (_, ctx) =
                                encode_cls_cached(&model.enc_t, &with_ecg, schema, false)?;
                            backward_cls(&model.enc_t, &ctx, &d_cls_t.row(i).to_owned(), &mut gt);
                        }
                    }
                    Ok((gl, ge, gt))
                })
                .collect();
        for (gl, ge, gt) in encoder_grads? {
            grads.enc_l.add_scaled(&gl, 1.0);
            grads.enc_e.add_scaled(&ge, 1.0);
            grads.enc_t.add_scaled(&gt, 1.0);
        }
    }
    Ok((value, grads))
}

/// The trainable weight group: encoders + projections, or projections only
/// when the encoders are frozen. Temperatures form their own group.
fn weight_group<'a>(
    model: &'a mut AlignmentModel,
    grads: &'a AlignmentModel,
    freeze_encoders: bool,
) -> (Vec<&'a mut [f64]>, Vec<&'a [f64]>) {
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut gs: Vec<&[f64]> = Vec::new();
    if !freeze_encoders {
        params.extend(model.enc_l.params_mut());
        params.extend(model.enc_e.params_mut());
        params.extend(model.enc_t.params_mut());
        gs.extend(grads.enc_l.params());
        gs.extend(grads.enc_e.params());
        gs.extend(grads.enc_t.params());
    }
    params.extend(model.proj_l.params_mut());
    params.extend(model.proj_e.params_mut());
    params.extend(model.proj_t.params_mut());
    gs.extend(grads.proj_l.params());
    gs.extend(grads.proj_e.params());
    gs.extend(grads.proj_t.params());
    (params, gs)
}

fn subject_with_ecg(subject: &SubjectRecord, ecg: &Option<EcgRecord>) -> SubjectRecord {
    let mut s = subject.clone();
    if let Some(ecg) = ecg {
        s.ecg = Some(ecg.clone());
    }
    s
}

/// Validation statistics: mean positive-pair and mean negative-pair cosine
/// similarity for (L,E) and (L,T).
fn embedding_stats(
    model: &AlignmentModel,
    cohort: &Cohort,
    prep: &[PreparedSubject],
    pairs: (bool, bool),
) -> Result<(f64, f64, f64, f64)> {
    let schema = &cohort.schema;
    let (use_e, use_t) = pairs;
    let rows: Result<Vec<(Array1<f64>, Option<Array1<f64>>, Option<Array1<f64>>)>> = prep
        .par_iter()
        .map(|p| {
            let subject = &cohort.subjects[p.cohort_index];
            let with_ecg = subject_with_ecg(subject, &p.ecg);
            Ok((
                encode_cls(&model.enc_l, &with_ecg, schema)?,
                use_e.then(|| encode_cls(&model.enc_e, &with_ecg, schema)).transpose()?,
                use_t.then(|| encode_cls(&model.enc_t, &with_ecg, schema)).transpose()?,
            ))
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let to_matrix = |pick: &dyn Fn(usize) -> Option<Array1<f64>>, dim: usize| {
        let mut m = Array2::zeros((n, dim));
        for i in 0..n {
            if let Some(row) = pick(i) {
                m.row_mut(i).assign(&row);
            }
        }
        m
    };
    let z_l =
        model.proj_l.forward(&to_matrix(&|i| Some(rows[i].0.clone()), model.enc_l.encoder.cfg.embed_dim)).0;
    let (mut le, mut lt) = ((f64::NAN, f64::NAN), (f64::NAN, f64::NAN));
    if use_e {
        let z_e =
            model.proj_e.forward(&to_matrix(&|i| rows[i].1.clone(), model.enc_e.encoder.cfg.embed_dim)).0;
        le = pos_neg(&z_l, &z_e);
    }
    if use_t {
        let z_t =
            model.proj_t.forward(&to_matrix(&|i| rows[i].2.clone(), model.enc_t.encoder.cfg.embed_dim)).0;
        lt = pos_neg(&z_l, &z_t);
    }
    Ok((le.0, le.1, lt.0, lt.1))
}

/// (mean diagonal, mean off-diagonal) cosine similarity between two
/// unit-row matrices.
pub fn pos_neg(za: &Array2<f64>, zb: &Array2<f64>) -> (f64, f64) {
    let sims = za.dot(&zb.t());
    let n = sims.nrows();
    let diag: f64 = (0..n).map(|i| sims[[i, i]]).sum::<f64>() / n as f64;
    let off: f64 = (sims.sum() - (0..n).map(|i| sims[[i, i]]).sum::<f64>())
        / (n * n - n) as f64;
    (diag, off)
}

/// Unit-norm 256-dim projections for a list of subjects; missing
/// modalities yield `None` components.
pub fn embed_batch(
    model: &AlignmentModel,
    subjects: &[&SubjectRecord],
    schema: &TabularSchema,
) -> Result<Vec<AlignedEmbedding>> {
    subjects
        .par_iter()
        .map(|subject| {
            let project = |enc: &ModalityEncoder,
                           proj: &ProjectionHead,
                           present: bool|
             -> Result<Option<Array1<f64>>> {
                if !present {
                    return Ok(None);
                }
                let cls = encode_cls(enc, subject, schema)?;
                let m = cls.insert_axis(ndarray::Axis(0));
                let (z, _) = proj.forward(&m);
                Ok(Some(z.row(0).to_owned()))
            };
            Ok(AlignedEmbedding {
                subject_id: subject.subject_id.clone(),
                z_l: project(&model.enc_l, &model.proj_l, subject.localizer.is_some())?,
                z_e: project(&model.enc_e, &model.proj_e, subject.ecg.is_some())?,
                z_t: project(&model.enc_t, &model.proj_t, subject.tabular.is_some())?,
            })
        })
        .collect()
}

fn write_stage2_csv(curve: &[Stage2Point], path: &Path) -> Result<()> {
    let mut out = String::from(
        "epoch,total_loss,loss_LE,loss_LT,tau_LE,tau_LT,pos_sim_LE,neg_sim_LE,pos_sim_LT,neg_sim_LT\n",
    );
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.epoch,
            p.total_loss,
            p.loss_le,
            p.loss_lt,
            p.tau_le,
            p.tau_lt,
            p.pos_sim_le,
            p.neg_sim_le,
            p.pos_sim_lt,
            p.neg_sim_lt
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlignmentMeta {
    seed: u64,
    epochs: usize,
    tau_le: f64,
    tau_lt: f64,
}

/// Writes the combined checkpoint: three encoder blobs with fingerprinted
/// sidecars, projection weights and temperatures.
pub fn save_alignment(
    dir: &Path,
    model: &AlignmentModel,
    schema: &TabularSchema,
    seed: u64,
    epochs: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, enc, uses_schema) in [
        ("encoder_L", &model.enc_l, false),
        ("encoder_E", &model.enc_e, false),
        ("encoder_T", &model.enc_t, true),
    ] {
        let meta = CheckpointMeta {
            stage: "stage2".into(),
            fingerprint: fingerprint(&enc.encoder.cfg, uses_schema.then_some(schema)),
            config: enc.encoder.cfg.clone(),
            epochs_run: epochs,
            final_train_loss: None,
            final_val_loss: None,
            seed,
        };
        save_modality_encoder(&dir.join(name), enc, &meta)?;
    }
    crate::encoders::write_weights(&dir.join("proj_L.bin"), &model.proj_l)?;
    crate::encoders::write_weights(&dir.join("proj_E.bin"), &model.proj_e)?;
    crate::encoders::write_weights(&dir.join("proj_T.bin"), &model.proj_t)?;
    write_json(
        &dir.join("alignment.json"),
        &AlignmentMeta {
            seed,
            epochs,
            tau_le: model.temps.tau_le(),
            tau_lt: model.temps.tau_lt(),
        },
    )
}

/// Loads a Stage-II checkpoint, refusing any encoder whose fingerprint
/// does not match the given configs and schema.
pub fn load_alignment(
    dir: &Path,
    cfg_l: &EncoderConfig,
    cfg_e: &EncoderConfig,
    cfg_t: &EncoderConfig,
    schema: &TabularSchema,
) -> Result<AlignmentModel> {
    let (enc_l, _) = load_modality_encoder(&dir.join("encoder_L"), cfg_l, None)?;
    let (enc_e, _) = load_modality_encoder(&dir.join("encoder_E"), cfg_e, None)?;
    let (enc_t, _) = load_modality_encoder(&dir.join("encoder_T"), cfg_t, Some(schema))?;
    let meta: AlignmentMeta = read_json(&dir.join("alignment.json"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut proj_l = ProjectionHead::new(cfg_l.embed_dim, &mut rng);
    let mut proj_e = ProjectionHead::new(cfg_e.embed_dim, &mut rng);
    let mut proj_t = ProjectionHead::new(cfg_t.embed_dim, &mut rng);
    crate::encoders::read_weights(&dir.join("proj_L.bin"), &mut proj_l)?;
    crate::encoders::read_weights(&dir.join("proj_E.bin"), &mut proj_e)?;
    crate::encoders::read_weights(&dir.join("proj_T.bin"), &mut proj_t)?;
    Ok(AlignmentModel {
        enc_l,
        enc_e,
        enc_t,
        proj_l,
        proj_e,
        proj_t,
        temps: TemperaturePair::new(meta.tau_le, meta.tau_lt)?,
    })
}

/// Small encoder configurations shared by tests across modules.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn tiny_configs() -> (EncoderConfig, EncoderConfig, EncoderConfig) {
        let l = EncoderConfig {
            modality: Modality::Localizer,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            patch_size: 56,
            num_positions: 16,
            token_dim: 56 * 56 * 3,
        };
        let e = EncoderConfig {
            modality: Modality::Ecg,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            patch_size: 500,
            num_positions: 120,
            token_dim: 500,
        };
        let t = EncoderConfig {
            modality: Modality::Tabular,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            patch_size: 0,
            num_positions: 15,
            token_dim: 16,
        };
        (l, e, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::split_cohort;
    use super::tests_support::tiny_configs;

    fn tiny_model(cohort: &Cohort, seed: u64) -> (ModalityEncoder, ModalityEncoder, ModalityEncoder) {
        let (cl, ce, ct) = tiny_configs();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (
            ModalityEncoder::new(&cl, None, &mut rng),
            ModalityEncoder::new(&ce, None, &mut rng),
            ModalityEncoder::new(&ct, Some(&cohort.schema), &mut rng),
        )
    }

    #[test]
    fn initial_loss_near_ln_batch_size() {
        let cohort = crate::synthetic::generate_cohort_in_memory(36, 70).unwrap();
        let cohort = split_cohort(cohort, (0.8, 0.1, 0.1), 0).unwrap();
        let (enc_l, enc_e, enc_t) = tiny_model(&cohort, 1);
        let hp = Stage2Hparams {
            epochs: 0,
            batch_size: 28,
            lr: 0.0,
            ..Default::default()
        };
        // epochs = 0: model returned at initialization
        let (model, _) = align_stage2(&cohort, enc_l, enc_e, enc_t, &hp, None).unwrap();

        let subjects: Vec<&SubjectRecord> =
            cohort.split_subjects(Split::Train).into_iter().take(28).collect();
        let embeddings = embed_batch(&model, &subjects, &cohort.schema).unwrap();
        let n = embeddings.len();
        let mut z_l = Array2::zeros((n, super::super::PROJ_DIM));
        let mut z_e = Array2::zeros((n, super::super::PROJ_DIM));
        let mut z_t = Array2::zeros((n, super::super::PROJ_DIM));
        for (i, e) in embeddings.iter().enumerate() {
            z_l.row_mut(i).assign(e.z_l.as_ref().unwrap());
            z_e.row_mut(i).assign(e.z_e.as_ref().unwrap());
            z_t.row_mut(i).assign(e.z_t.as_ref().unwrap());
        }
        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let loss = super::super::total_loss(&z_l, &z_e, &z_t, &temps).unwrap();
        let ln_n = (n as f64).ln();
        assert!(
            (loss - ln_n).abs() / ln_n < 0.10,
            "initial loss {loss:.3} should be within 10% of ln {n} = {ln_n:.3}"
        );
    }

    #[test]
    fn alignment_improves_positive_similarity_and_checkpoints() {
        let cohort = crate::synthetic::generate_cohort_in_memory(30, 71).unwrap();
        let cohort = split_cohort(cohort, (0.7, 0.2, 0.1), 0).unwrap();
        let (enc_l, enc_e, enc_t) = tiny_model(&cohort, 2);
        let hp = Stage2Hparams {
            epochs: 6,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 5,
            freeze_encoders: false,
            tau_le_init: 0.1,
            tau_lt_init: 0.25,
            pair_le: true,
            pair_lt: true,
        };
        let (model, report) =
            align_stage2(&cohort, enc_l, enc_e, enc_t, &hp, None).unwrap();
        let first = &report.curve[0];
        let last = report.curve.last().unwrap();
        assert!(
            last.total_loss < first.total_loss,
            "loss should fall: {} -> {}",
            first.total_loss,
            last.total_loss
        );
        for p in &report.curve {
            assert!(p.tau_le >= super::super::TAU_MIN && p.tau_le <= super::super::TAU_MAX);
            assert!(p.tau_lt >= super::super::TAU_MIN && p.tau_lt <= super::super::TAU_MAX);
        }

        // save/load round trip preserves weights and temperatures
        let dir = tempfile::tempdir().unwrap();
        save_alignment(dir.path(), &model, &cohort.schema, 5, 6).unwrap();
        let (cl, ce, ct) = tiny_configs();
        let loaded = load_alignment(dir.path(), &cl, &ce, &ct, &cohort.schema).unwrap();
        assert_eq!(loaded.enc_l.flat(), model.enc_l.flat());
        assert_eq!(loaded.proj_t.flat(), model.proj_t.flat());
        assert!((loaded.temps.tau_le() - model.temps.tau_le()).abs() < 1e-12);

        // wrong config is refused
        let mut bad = cl.clone();
        bad.embed_dim = 32;
        bad.decoder_dim = 16;
        assert!(matches!(
            load_alignment(dir.path(), &bad, &ce, &ct, &cohort.schema),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let cohort = crate::synthetic::generate_cohort_in_memory(6, 72).unwrap();
        let cohort = split_cohort(cohort, (0.5, 0.3, 0.2), 0).unwrap();
        let (enc_l, enc_e, enc_t) = tiny_model(&cohort, 3);
        let hp = Stage2Hparams { epochs: 0, batch_size: 4, ..Default::default() };
        let (model, _) = align_stage2(&cohort, enc_l, enc_e, enc_t, &hp, None).unwrap();

        let subjects: Vec<&SubjectRecord> = cohort.subjects.iter().collect();
        let a = embed_batch(&model, &subjects, &cohort.schema).unwrap();
        let b = embed_batch(&model, &subjects, &cohort.schema).unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            for z in [&ea.z_l, &ea.z_e, &ea.z_t] {
                let norm = z.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
            assert_eq!(ea.z_l, eb.z_l);
            assert_eq!(ea.z_e, eb.z_e);
        }

        // a record missing its ecg yields a flagged (absent) component
        let mut partial = cohort.subjects[0].clone();
        partial.ecg = None;
        let emb = embed_batch(&model, &[&partial], &cohort.schema).unwrap();
        assert!(emb[0].z_e.is_none());
        assert!(emb[0].z_l.is_some());
    }
}
