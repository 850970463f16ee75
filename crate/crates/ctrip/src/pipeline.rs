//! Configuration-driven orchestration of the full pipeline and every
//! ablation variant, shared by the `ctrip` binary and the crate examples.
//!
//! Artifacts for one experiment live in a single run directory:
//! `stage1_<M>.{bin,json}` checkpoints and loss curves, a `stage2/`
//! alignment checkpoint, `stage3_<variant>_<fraction>` regressors,
//! prediction tables, `agreement_report.json`, `scaling_table.csv`,
//! embedding exports, attention PNGs and a `manifest.json` fingerprinting
//! the inputs that produced them.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{
    align_stage2, load_alignment, save_alignment, AlignmentModel, ProjectionHead, Stage2Hparams,
    TemperaturePair,
};
use crate::data_model::{
    load_cohort_subset, write_json, Cohort, DataKind, Modality, Split,
    TabularSchema,
};
use crate::encoders::{
    fingerprint, load_mae, pretrain_stage1, save_mae, CheckpointMeta, EncoderConfig,
    ModalityEncoder, Stage1Report, TrainHparams,
};
use crate::evaluation::{
    phenotype_agreement, scaling_experiment, write_scaling_csv, AgreementReport, PredictionSet,
    ScalingRow,
};
use crate::regression::{
    train_regressor, FinetuneConfig, RegressionInput, Stage3Report, TrainedRegressor,
};
use crate::{Error, Result};

/// Experiment variants: the four supervised baselines, the bimodal and
/// trimodal alignment ablations, and the full tri-modal pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    CmrSup,
    LSup,
    ESup,
    TSup,
    LT,
    LE,
    LETp,
    CTrip,
}

pub const ALL_VARIANTS: [Variant; 8] = [
    Variant::CmrSup,
    Variant::LSup,
    Variant::ESup,
    Variant::TSup,
    Variant::LT,
    Variant::LE,
    Variant::LETp,
    Variant::CTrip,
];

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        let canon = s.trim().to_ascii_lowercase().replace('^', "");
        Ok(match canon.as_str() {
            "cmr_sup" | "cmr-sup" | "cmrsup" => Variant::CmrSup,
            "l_sup" | "l-sup" | "lsup" => Variant::LSup,
            "e_sup" | "e-sup" | "esup" => Variant::ESup,
            "t_sup" | "t-sup" | "tsup" => Variant::TSup,
            "l+t" => Variant::LT,
            "l+e" => Variant::LE,
            "l+e+tp" => Variant::LETp,
            "l+e+t" | "c-trip" | "ctrip" => Variant::CTrip,
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {s:?}; expected one of CMR_sup, L_sup, E_sup, T_sup, L+T, L+E, L+E+Tp, C-TRIP"
                )))
            }
        })
    }

    /// Per-subject files this variant is allowed to consume.
    pub fn data_kinds(self) -> Vec<DataKind> {
        match self {
            Variant::CmrSup => vec![DataKind::Cmr],
            Variant::LSup => vec![DataKind::Localizer],
            Variant::ESup => vec![DataKind::Ecg],
            Variant::TSup => vec![DataKind::Tabular],
            Variant::LT => vec![DataKind::Localizer, DataKind::Tabular],
            Variant::LE => vec![DataKind::Localizer, DataKind::Ecg],
            Variant::LETp | Variant::CTrip => {
                vec![DataKind::Localizer, DataKind::Ecg, DataKind::Tabular]
            }
        }
    }

    /// Whether Stage II exists for this variant, and over which pairs.
    pub fn alignment_pairs(self) -> Option<(bool, bool)> {
        match self {
            Variant::LT => Some((false, true)),
            Variant::LE => Some((true, false)),
            Variant::LETp | Variant::CTrip => Some((true, true)),
            _ => None,
        }
    }

    pub fn inject_phenotypes(self) -> bool {
        self == Variant::LETp
    }

    /// What the Stage-III regressor consumes. Aligned variants predict
    /// from localizers only; baselines predict from their own modality.
    pub fn regression_input(self) -> RegressionInput {
        match self {
            Variant::CmrSup => RegressionInput::Cmr,
            Variant::ESup => RegressionInput::Ecg,
            Variant::TSup => RegressionInput::Tabular,
            _ => RegressionInput::Localizer,
        }
    }

    /// Supervised baselines train randomly initialized encoders end to
    /// end; aligned variants fine-tune pre-trained ones gently.
    pub fn is_supervised_baseline(self) -> bool {
        matches!(self, Variant::CmrSup | Variant::LSup | Variant::ESup | Variant::TSup)
    }

    /// Modalities whose Stage-I pretraining this variant needs.
    pub fn pretrain_modalities(self) -> Vec<Modality> {
        match self.alignment_pairs() {
            None => vec![],
            Some((le, lt)) => {
                let mut m = vec![Modality::Localizer];
                if le {
                    m.push(Modality::Ecg);
                }
                if lt {
                    m.push(Modality::Tabular);
                }
                m
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::CmrSup => "CMR_sup",
            Variant::LSup => "L_sup",
            Variant::ESup => "E_sup",
            Variant::TSup => "T_sup",
            Variant::LT => "L+T",
            Variant::LE => "L+E",
            Variant::LETp => "L+E+Tp",
            Variant::CTrip => "C-TRIP",
        };
        f.write_str(s)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Variant::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Transformer dimensions for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
}

/// Architecture section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub localizer: ArchConfig,
    pub ecg: ArchConfig,
    pub tabular: ArchConfig,
    pub image_patch: usize,
    pub ecg_patch: usize,
    pub mask_ratio: f64,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn encoder_cfg(&self, modality: Modality, schema: &TabularSchema) -> EncoderConfig {
        use crate::data_model::{ECG_LEADS, ECG_SECONDS, IMG_SIZE, SLICES};
        let arch = match modality {
            Modality::Localizer => &self.localizer,
            Modality::Ecg => &self.ecg,
            Modality::Tabular => &self.tabular,
        };
        let (patch_size, num_positions, token_dim) = match modality {
            Modality::Localizer => {
                let grid = IMG_SIZE / self.image_patch;
                (self.image_patch, grid * grid, self.image_patch * self.image_patch * SLICES)
            }
            Modality::Ecg => {
                let timesteps = ECG_SECONDS * 500;
                (self.ecg_patch, ECG_LEADS * timesteps / self.ecg_patch, self.ecg_patch)
            }
            Modality::Tabular => {
                (0, schema.numeric.len() + schema.categorical.len(), arch.embed_dim)
            }
        };
        EncoderConfig {
            modality,
            embed_dim: arch.embed_dim,
            depth: arch.depth,
            num_heads: arch.num_heads,
            decoder_dim: arch.decoder_dim,
            decoder_depth: arch.decoder_depth,
            mask_ratio: self.mask_ratio,
            mlp_ratio: self.mlp_ratio,
            patch_size,
            num_positions,
            token_dim,
        }
    }
}

/// Data-generation and split section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_subjects: usize,
    pub generator_seed: u64,
    pub split_fractions: (f64, f64, f64),
    /// Split assignment seed; kept separate from the run seed so the test
    /// split stays fixed while training seeds vary.
    pub split_seed: u64,
}

/// One experiment: variant, seeds, paths and per-stage hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: TrainHparams,
    pub stage2: Stage2Hparams,
    pub stage3: FinetuneConfig,
}

impl ExperimentConfig {
    /// Reference-scale recipe: 400/150/100 epochs at batch 256, embedding
    /// dims 768/384/384, lr 5e-4 pretraining, 1e-3 head / 1e-4 encoder.
    pub fn reference(variant: Variant) -> Self {
        ExperimentConfig {
            variant,
            seed: 0,
            deterministic: false,
            data: DataConfig {
                n_subjects: 20877,
                generator_seed: 1,
                split_fractions: (0.698, 0.152, 0.150),
                split_seed: 0,
            },
            model: ModelConfig {
                localizer: ArchConfig {
                    embed_dim: 768,
                    depth: 12,
                    num_heads: 12,
                    decoder_dim: 384,
                    decoder_depth: 2,
                },
                ecg: ArchConfig {
                    embed_dim: 384,
                    depth: 6,
                    num_heads: 6,
                    decoder_dim: 192,
                    decoder_depth: 2,
                },
                tabular: ArchConfig {
                    embed_dim: 384,
                    depth: 6,
                    num_heads: 6,
                    decoder_dim: 192,
                    decoder_depth: 2,
                },
                image_patch: 16,
                ecg_patch: 100,
                mask_ratio: 0.75,
                mlp_ratio: 4,
            },
            stage1: TrainHparams::default(),
            stage2: Stage2Hparams::default(),
            stage3: FinetuneConfig::default(),
        }
    }

    /// Desk-scale recipe sized for a 512-subject synthetic cohort on a
    /// few CPU cores; every field remains overridable.
    pub fn desk(variant: Variant) -> Self {
        let mut cfg = ExperimentConfig::reference(variant);
        cfg.data = DataConfig {
            n_subjects: 512,
            generator_seed: 1,
            split_fractions: (0.7, 0.15, 0.15),
            split_seed: 0,
        };
        cfg.model = ModelConfig {
            localizer: ArchConfig {
                embed_dim: 64,
                depth: 3,
                num_heads: 4,
                decoder_dim: 32,
                decoder_depth: 2,
            },
            ecg: ArchConfig {
                embed_dim: 48,
                depth: 2,
                num_heads: 4,
                decoder_dim: 24,
                decoder_depth: 1,
            },
            tabular: ArchConfig {
                embed_dim: 48,
                depth: 2,
                num_heads: 4,
                decoder_dim: 24,
                decoder_depth: 1,
            },
            image_patch: 16,
            ecg_patch: 250,
            mask_ratio: 0.75,
            mlp_ratio: 2,
        };
        cfg.stage1 = TrainHparams {
            epochs: 25,
            batch_size: 32,
            lr: 1e-3,
            min_lr_fraction: 0.02,
            weight_decay: 0.02,
            patience: 20,
            seed: cfg.seed,
            augment: true,
        };
        cfg.stage2 = Stage2Hparams {
            epochs: 30,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.01,
            seed: cfg.seed,
            freeze_encoders: false,
            ..Default::default()
        };
        cfg.stage3 = FinetuneConfig {
            data_fraction: 1.0,
            lr_head: 1e-3,
            lr_encoder: 1e-4,
            epochs: 60,
            batch_size: 32,
            weight_decay: 0.01,
            val_every: 2,
            patience: 10,
            seed: cfg.seed,
        };
        cfg
    }

    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))
    }

    pub fn to_toml(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Propagates the run seed into every stage (each derives its own
    /// streams) and re-seeds the supervised-baseline encoder rate.
    pub fn resolved(mut self) -> Self {
        self.stage1.seed = self.seed;
        self.stage2.seed = self.seed;
        self.stage3.seed = self.seed;
        if self.variant.is_supervised_baseline() {
            // nothing pre-trained to preserve: full-rate encoder training
            self.stage3.lr_encoder = self.stage3.lr_head;
        }
        self
    }
}

/// A resolved experiment bound to a data directory and a run directory.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub variant: Variant,
    pub seed: u64,
    pub config_sha256: String,
    pub input_sha256: String,
    pub created_unix_secs: u64,
    pub artifacts: Vec<String>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, data_dir: &Path, run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        Ok(Experiment {
            cfg: cfg.resolved(),
            data_dir: data_dir.to_path_buf(),
            run_dir: run_dir.to_path_buf(),
        })
    }

    /// Loads exactly the per-subject files the variant may consume,
    /// assigns splits and applies phenotype injection when configured.
    pub fn load_cohort(&self) -> Result<Cohort> {
        let kinds = self.cfg.variant.data_kinds();
        let outcome = load_cohort_subset(&self.data_dir, &kinds)?;
        let mut cohort = crate::data_model::split_cohort(
            outcome.cohort,
            self.cfg.data.split_fractions,
            self.cfg.data.split_seed,
        )?;
        if self.cfg.variant.inject_phenotypes() {
            let stats = cohort.phenotype_stats(Split::Train);
            cohort.schema = cohort.schema.with_injected_phenotypes(&stats)?;
        }
        Ok(cohort)
    }

    fn encoder_cfg(&self, cohort: &Cohort, modality: Modality) -> EncoderConfig {
        self.cfg.model.encoder_cfg(modality, &cohort.schema)
    }

    fn stage1_base(&self, modality: Modality) -> PathBuf {
        self.run_dir.join(format!("stage1_{}", modality.code()))
    }

    fn stage2_dir(&self) -> PathBuf {
        self.run_dir.join("stage2")
    }

    fn stage3_base(&self, fraction: f64) -> PathBuf {
        self.run_dir.join(format!("stage3_{}_{}", self.cfg.variant, fraction))
    }

    /// Stage I for one modality; writes checkpoint and loss curve.
    pub fn run_pretrain(&self, modality: Modality) -> Result<Stage1Report> {
        let pairs = self.cfg.variant.alignment_pairs().ok_or_else(|| {
            Error::Config(format!(
                "variant {} has no pretraining stage (supervised baseline)",
                self.cfg.variant
            ))
        })?;
        let allowed = match modality {
            Modality::Localizer => true,
            Modality::Ecg => pairs.0,
            Modality::Tabular => pairs.1,
        };
        if !allowed {
            return Err(Error::Config(format!(
                "variant {} does not use modality {}",
                self.cfg.variant,
                modality.code()
            )));
        }
        let cohort = self.load_cohort()?;
        let cfg = self.encoder_cfg(&cohort, modality);
        let (model, report) =
            pretrain_stage1(&cohort, &cfg, &self.cfg.stage1, Some(&self.run_dir))?;
        let schema = (modality == Modality::Tabular).then_some(&cohort.schema);
        let meta = CheckpointMeta {
            stage: "stage1".into(),
            fingerprint: fingerprint(&cfg, schema),
            config: cfg.clone(),
            epochs_run: report.curve.len(),
            final_train_loss: Some(report.final_train_loss),
            final_val_loss: Some(report.best_val_loss),
            seed: self.cfg.stage1.seed,
        };
        save_mae(&self.stage1_base(modality), &model, &meta)?;
        self.write_manifest("pretrain", &[format!("stage1_{}.bin", modality.code())])?;
        Ok(report)
    }

    /// Stage II over the variant's alignment pairs; single-modality
    /// variants are refused.
    pub fn run_align(&self) -> Result<crate::contrastive::Stage2Report> {
        let pairs = self.cfg.variant.alignment_pairs().ok_or_else(|| {
            Error::Config(format!("variant {} has no alignment stage", self.cfg.variant))
        })?;
        let cohort = self.load_cohort()?;

        let enc_l = self.load_stage1(&cohort, Modality::Localizer)?;
        // towers outside the pair set stay randomly initialized and untrained
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed ^ 0xA11C);
        let enc_e = if pairs.0 {
            self.load_stage1(&cohort, Modality::Ecg)?
        } else {
            ModalityEncoder::new(&self.encoder_cfg(&cohort, Modality::Ecg), None, &mut rng)
        };
        let enc_t = if pairs.1 {
            self.load_stage1(&cohort, Modality::Tabular)?
        } else {
            ModalityEncoder::new(
                &self.encoder_cfg(&cohort, Modality::Tabular),
                Some(&cohort.schema),
                &mut rng,
            )
        };

        let mut hp = self.cfg.stage2.clone();
        hp.pair_le = pairs.0;
        hp.pair_lt = pairs.1;
        let (model, report) =
            align_stage2(&cohort, enc_l, enc_e, enc_t, &hp, Some(&self.run_dir))?;
        save_alignment(&self.stage2_dir(), &model, &cohort.schema, hp.seed, hp.epochs)?;
        self.write_manifest("align", &["stage2".into(), "stage2_curve.csv".into()])?;
        Ok(report)
    }

    fn load_stage1(&self, cohort: &Cohort, modality: Modality) -> Result<ModalityEncoder> {
        let cfg = self.encoder_cfg(cohort, modality);
        let schema = (modality == Modality::Tabular).then_some(&cohort.schema);
        let (mae, _) = load_mae(&self.stage1_base(modality), &cfg, schema)?;
        Ok(mae.base)
    }

    fn load_stage2(&self, cohort: &Cohort) -> Result<AlignmentModel> {
        load_alignment(
            &self.stage2_dir(),
            &self.encoder_cfg(cohort, Modality::Localizer),
            &self.encoder_cfg(cohort, Modality::Ecg),
            &self.encoder_cfg(cohort, Modality::Tabular),
            &cohort.schema,
        )
    }

    /// Stage III at the given training fraction; produces a regressor
    /// checkpoint, a loss curve and test-split predictions.
    pub fn run_finetune(&self, fraction: f64) -> Result<Stage3Report> {
        let cohort = self.load_cohort()?;
        let input = self.cfg.variant.regression_input();

        let encoder = if self.cfg.variant.is_supervised_baseline() {
            let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed ^ 0x50B);
            let modality = input.modality();
            let schema = (modality == Modality::Tabular).then_some(&cohort.schema);
            ModalityEncoder::new(&self.encoder_cfg(&cohort, modality), schema, &mut rng)
        } else {
            self.load_stage2(&cohort)?.enc_l
        };

        let mut cfg = self.cfg.stage3.clone();
        cfg.data_fraction = fraction;
        let curve = self.run_dir.join(format!("stage3_{}_{}.csv", self.cfg.variant, fraction));
        let (model, report) = train_regressor(&cohort, encoder, input, &cfg, Some(&curve))?;

        crate::regression::save_regressor(&self.stage3_base(fraction), &model, &cohort.schema)?;
        self.write_predictions(&model, &cohort, fraction)?;
        self.write_manifest(
            "finetune",
            &[format!("stage3_{}_{}.bin", self.cfg.variant, fraction)],
        )?;
        Ok(report)
    }

    fn load_stage3(&self, cohort: &Cohort, fraction: f64) -> Result<TrainedRegressor> {
        let input = self.cfg.variant.regression_input();
        let modality = input.modality();
        let schema = (modality == Modality::Tabular).then_some(&cohort.schema);
        crate::regression::load_regressor(
            &self.stage3_base(fraction),
            &self.encoder_cfg(cohort, modality),
            schema,
            input,
        )
    }

    /// Test-split predictions for every phenotype.
    pub fn test_predictions(
        &self,
        model: &TrainedRegressor,
        cohort: &Cohort,
    ) -> Result<PredictionSet> {
        let test = cohort.split_subjects(Split::Test);
        let names = &cohort.schema.phenotype_names;
        let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(test.len()); names.len()];
        let mut truths: Vec<Vec<f64>> = vec![Vec::with_capacity(test.len()); names.len()];
        for subject in &test {
            let y = model.predict_subject(subject, &cohort.schema)?;
            for k in 0..names.len() {
                preds[k].push(y.values[k]);
                truths[k].push(subject.phenotypes.values[k]);
            }
        }
        Ok(names
            .iter()
            .cloned()
            .zip(preds.into_iter().zip(truths))
            .map(|(name, (p, t))| (name, p, t))
            .collect())
    }

    fn write_predictions(
        &self,
        model: &TrainedRegressor,
        cohort: &Cohort,
        fraction: f64,
    ) -> Result<PathBuf> {
        let test = cohort.split_subjects(Split::Test);
        let mut out = String::from("subject_id,phenotype_name,y_true,y_pred\n");
        for subject in &test {
            let y = model.predict_subject(subject, &cohort.schema)?;
            for (k, name) in cohort.schema.phenotype_names.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    subject.subject_id, name, subject.phenotypes.values[k], y.values[k]
                ));
            }
        }
        let path = self
            .run_dir
            .join(format!("predictions_{}_{}.csv", self.cfg.variant, fraction));
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Agreement statistics of the stage-3 regressor on the test split.
    pub fn run_evaluate(&self, fraction: f64) -> Result<AgreementReport> {
        let cohort = self.load_cohort()?;
        let model = self.load_stage3(&cohort, fraction)?;
        let predictions = self.test_predictions(&model, &cohort)?;

        let mut per_phenotype = std::collections::BTreeMap::new();
        for (name, y_pred, y_true) in &predictions {
            per_phenotype.insert(
                name.clone(),
                phenotype_agreement(y_pred, y_true, self.cfg.seed)?,
            );
        }
        let mut report = AgreementReport::default();
        report.variants.insert(self.cfg.variant.to_string(), per_phenotype);
        write_json(&self.run_dir.join("agreement_report.json"), &report)?;
        self.write_manifest("evaluate", &["agreement_report.json".into()])?;
        Ok(report)
    }

    /// Scaling table over fractions and seeds for this run's variant.
    ///
    /// Each cell fine-tunes from the same Stage-II checkpoint (or from
    /// scratch for baselines) with the cell's seed, then evaluates on the
    /// fixed test split.
    pub fn run_scaling(&self, fractions: &[f64], seeds: &[u64]) -> Result<Vec<ScalingRow>> {
        let cohort = self.load_cohort()?;
        let variant = self.cfg.variant;
        let rows = scaling_experiment(
            &[variant.to_string()],
            fractions,
            seeds,
            |_, fraction, seed| {
                let input = variant.regression_input();
                let encoder = if variant.is_supervised_baseline() {
                    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x50B);
                    let modality = input.modality();
                    let schema = (modality == Modality::Tabular).then_some(&cohort.schema);
                    ModalityEncoder::new(
                        &self.encoder_cfg(&cohort, modality),
                        schema,
                        &mut rng,
                    )
                } else {
                    self.load_stage2(&cohort)?.enc_l
                };
                let mut cfg = self.cfg.stage3.clone();
                cfg.data_fraction = fraction;
                cfg.seed = seed;
                let (model, _) = train_regressor(&cohort, encoder, input, &cfg, None)?;
                self.test_predictions(&model, &cohort)
            },
        )?;
        write_scaling_csv(&rows, &self.run_dir.join("scaling_table.csv"))?;
        self.write_manifest("scaling", &["scaling_table.csv".into()])?;
        Ok(rows)
    }

    /// Attention maps of the trained stage-3 localizer encoder for the
    /// first `count` validation subjects.
    pub fn run_attention(&self, fraction: f64, count: usize) -> Result<Vec<PathBuf>> {
        let cohort = self.load_cohort()?;
        let model = self.load_stage3(&cohort, fraction)?;
        if model.encoder.modality() != Modality::Localizer {
            return Err(Error::Config(format!(
                "variant {} regresses from {:?}; attention maps need an image encoder",
                self.cfg.variant,
                model.encoder.modality()
            )));
        }
        let mut paths = Vec::new();
        for subject in cohort.split_subjects(Split::Val).into_iter().take(count) {
            let map = crate::interpret::attention_map(&model.encoder, subject.localizer()?)?;
            let path = self
                .run_dir
                .join(format!("attn_{}_{}.png", subject.subject_id, self.cfg.variant));
            crate::interpret::save_attention_png(&map, &path)?;
            paths.push(path);
        }
        self.write_manifest("attention", &["attn_*.png".into()])?;
        Ok(paths)
    }

    /// Embedding export: `pre` composes Stage-I encoders with fixed-seed
    /// random projections, `post` loads the Stage-II checkpoint.
    pub fn run_embed(&self, tag: &str) -> Result<PathBuf> {
        let cohort = self.load_cohort()?;
        let model = match tag {
            "post" => self.load_stage2(&cohort)?,
            "pre" => {
                let mut rng = ChaCha20Rng::seed_from_u64(0xE4BED);
                AlignmentModel {
                    enc_l: self.load_stage1(&cohort, Modality::Localizer)?,
                    enc_e: self.load_stage1(&cohort, Modality::Ecg)?,
                    enc_t: self.load_stage1(&cohort, Modality::Tabular)?,
                    proj_l: ProjectionHead::new(self.cfg.model.localizer.embed_dim, &mut rng),
                    proj_e: ProjectionHead::new(self.cfg.model.ecg.embed_dim, &mut rng),
                    proj_t: ProjectionHead::new(self.cfg.model.tabular.embed_dim, &mut rng),
                    temps: TemperaturePair::new(
                        self.cfg.stage2.tau_le_init,
                        self.cfg.stage2.tau_lt_init,
                    )?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "embed tag must be 'pre' or 'post', got {other:?}"
                )))
            }
        };
        let path = crate::interpret::export_embeddings(&model, &cohort, tag, &self.run_dir)?;
        self.write_manifest("embed", &[format!("embeddings_{tag}.csv")])?;
        Ok(path)
    }

    fn write_manifest(&self, command: &str, artifacts: &[String]) -> Result<()> {
        let config_json = serde_json::to_vec(&self.cfg).expect("config serializes");
        let mut input_hash = Sha256::new();
        for file in ["schema.json", "cohort_manifest.json"] {
            let path = self.data_dir.join(file);
            if let Ok(bytes) = std::fs::read(&path) {
                input_hash.update(&bytes);
            }
        }
        let manifest = RunManifest {
            command: command.to_string(),
            variant: self.cfg.variant,
            seed: self.cfg.seed,
            config_sha256: hex_digest(&config_json),
            input_sha256: format!("{:x}", input_hash.finalize()),
            created_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            artifacts: artifacts.to_vec(),
        };
        write_json(&self.run_dir.join("manifest.json"), &manifest)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Generates the synthetic cohort directory.
pub fn run_gen_data(n: usize, seed: u64, dir: &Path) -> Result<usize> {
    let cohort = crate::synthetic::generate_cohort(n, seed, dir)?;
    Ok(cohort.len())
}

/// Constrains the global rayon pool; call once at process start. Used by
/// deterministic mode to force single-threaded kernels (parallel mode is
/// also bit-reproducible through fixed-order reductions, but this removes
/// scheduling variance entirely).
pub fn set_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

/// End-to-end convenience: every stage the variant needs, in order.
pub fn run_full_pipeline(exp: &Experiment, fraction: f64) -> Result<AgreementReport> {
    for modality in exp.cfg.variant.pretrain_modalities() {
        exp.run_pretrain(modality)?;
    }
    if exp.cfg.variant.alignment_pairs().is_some() {
        exp.run_align()?;
    }
    exp.run_finetune(fraction)?;
    exp.run_evaluate(fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(&v.to_string()).unwrap(), v);
        }
        assert_eq!(Variant::parse("c-trip").unwrap(), Variant::CTrip);
        assert_eq!(Variant::parse("L+E+T^p").unwrap(), Variant::LETp);
        assert_eq!(Variant::parse("L+E+T").unwrap(), Variant::CTrip);
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn variant_gating_tables() {
        assert_eq!(Variant::CmrSup.data_kinds(), vec![DataKind::Cmr]);
        assert_eq!(Variant::LSup.data_kinds(), vec![DataKind::Localizer]);
        assert!(Variant::LSup.alignment_pairs().is_none());
        assert_eq!(Variant::LT.alignment_pairs(), Some((false, true)));
        assert_eq!(Variant::CTrip.alignment_pairs(), Some((true, true)));
        assert!(Variant::LETp.inject_phenotypes());
        assert!(!Variant::CTrip.inject_phenotypes());
        assert_eq!(Variant::ESup.regression_input(), RegressionInput::Ecg);
        assert_eq!(Variant::CTrip.regression_input(), RegressionInput::Localizer);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::desk(Variant::CTrip);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experiment.toml");
        cfg.to_toml(&path).unwrap();
        let back = ExperimentConfig::from_toml(&path).unwrap();
        assert_eq!(back.variant, Variant::CTrip);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.stage1.epochs, cfg.stage1.epochs);
    }

    #[test]
    fn reference_config_builds_valid_encoder_configs() {
        let cfg = ExperimentConfig::reference(Variant::CTrip);
        let schema = crate::synthetic::tabular_schema();
        for modality in [Modality::Localizer, Modality::Ecg, Modality::Tabular] {
            cfg.model.encoder_cfg(modality, &schema).validate_against_schema(&schema).unwrap();
        }
        let desk = ExperimentConfig::desk(Variant::CTrip);
        for modality in [Modality::Localizer, Modality::Ecg, Modality::Tabular] {
            desk.model.encoder_cfg(modality, &schema).validate_against_schema(&schema).unwrap();
        }
    }

    #[test]
    fn baseline_resolution_raises_encoder_lr() {
        let cfg = ExperimentConfig::desk(Variant::LSup).resolved();
        assert_eq!(cfg.stage3.lr_encoder, cfg.stage3.lr_head);
        let cfg = ExperimentConfig::desk(Variant::CTrip).resolved();
        assert!(cfg.stage3.lr_encoder < cfg.stage3.lr_head);
    }
}
