//! Canonical subject record, phenotype schema, dataset directory layout and
//! subject-level split logic shared by all pipeline stages.
//!
//! On-disk layout (one directory per subject under the cohort root):
//!
//! ```text
//! <root>/schema.json                 tabular schema + phenotype names
//! <root>/<subject_id>/localizer.npy  f32 [3, 224, 224], z-normalized per stack
//! <root>/<subject_id>/cmr.npy        optional f32 [3, 224, 224] cine stand-in
//! <root>/<subject_id>/ecg.bin        f32 little-endian, row-major [12, 5000]
//! <root>/<subject_id>/tabular.json   {"numeric": {...}, "categorical": {...}}
//! <root>/<subject_id>/phenotypes.json {name: value}, 18 entries
//! ```

mod io;

pub use io::{
    load_cohort, load_cohort_subset, read_json, read_npy_f32, save_cohort, write_json,
    write_npy_f32, LoadOutcome,
};

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SLICES: usize = 3;
pub const IMG_SIZE: usize = 224;
pub const ECG_LEADS: usize = 12;
pub const ECG_SECONDS: usize = 10;
pub const DEFAULT_SAMPLING_RATE_HZ: u32 = 500;
pub const PHENOTYPE_COUNT: usize = 18;

/// Phenotypes that must exist in every cohort.
pub const REQUIRED_PHENOTYPES: [&str; 4] = ["LVEF[%]", "RVEF[%]", "LVM[g]", "RVEDV[mL]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// The three model modalities: localizer stack, ECG, tabular record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Localizer,
    Ecg,
    Tabular,
}

impl Modality {
    pub fn code(self) -> &'static str {
        match self {
            Modality::Localizer => "L",
            Modality::Ecg => "E",
            Modality::Tabular => "T",
        }
    }
}

/// Per-subject files the loader can be asked for. `Cmr` is the optional
/// cine stand-in consumed only by the CMR-supervised baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DataKind {
    Localizer,
    Cmr,
    Ecg,
    Tabular,
}

impl DataKind {
    pub fn file_name(self) -> &'static str {
        match self {
            DataKind::Localizer => "localizer.npy",
            DataKind::Cmr => "cmr.npy",
            DataKind::Ecg => "ecg.bin",
            DataKind::Tabular => "tabular.json",
        }
    }
}

pub const ALL_DATA_KINDS: [DataKind; 3] = [DataKind::Localizer, DataKind::Ecg, DataKind::Tabular];

/// Intensity-normalized image stack `[3, 224, 224]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub voxels: Array3<f32>,
}

impl ImageStack {
    /// Validates shape, finiteness and per-stack normalization
    /// (|mean| <= 0.05, |std - 1| <= 0.05).
    pub fn validated(voxels: Array3<f32>) -> Result<Self> {
        if voxels.dim() != (SLICES, IMG_SIZE, IMG_SIZE) {
            return Err(Error::Shape(format!(
                "image stack must be [{SLICES}, {IMG_SIZE}, {IMG_SIZE}], got {:?}",
                voxels.dim()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("image stack contains NaN/Inf".into()));
        }
        let n = voxels.len() as f64;
        let mean = voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if mean.abs() > 0.05 || (std - 1.0).abs() > 0.05 {
            return Err(Error::Invalid(format!(
                "image stack not intensity-normalized (mean {mean:.4}, std {std:.4})"
            )));
        }
        Ok(ImageStack { voxels })
    }

    /// Z-normalizes an arbitrary finite stack to zero mean / unit variance.
    pub fn normalize(mut voxels: Array3<f32>) -> Result<Self> {
        if voxels.dim() != (SLICES, IMG_SIZE, IMG_SIZE) {
            return Err(Error::Shape(format!(
                "image stack must be [{SLICES}, {IMG_SIZE}, {IMG_SIZE}], got {:?}",
                voxels.dim()
            )));
        }
        let n = voxels.len() as f64;
        let mean = voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-12);
        voxels.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
        ImageStack::validated(voxels)
    }
}

/// 12-lead ECG record; `drift_corrected` must be set before Stage-I
/// pretraining consumes the record.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub samples: Array2<f32>,
    pub sampling_rate_hz: u32,
    pub drift_corrected: bool,
}

impl EcgRecord {
    pub fn validated(samples: Array2<f32>, sampling_rate_hz: u32) -> Result<Self> {
        let expected = ECG_SECONDS * sampling_rate_hz as usize;
        if samples.nrows() != ECG_LEADS || samples.ncols() != expected {
            return Err(Error::Shape(format!(
                "ecg must be [{ECG_LEADS}, {expected}] at {sampling_rate_hz} Hz, got {:?}",
                samples.dim()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("ecg contains NaN/Inf".into()));
        }
        Ok(EcgRecord { samples, sampling_rate_hz, drift_corrected: false })
    }

    pub fn timesteps(&self) -> usize {
        self.samples.ncols()
    }
}

/// Raw tabular values in schema order. Numeric values are stored raw and
/// z-normalized against the schema when tokenized, so a save/load round
/// trip reproduces the original bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericFeature {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
}

/// Cohort-level feature schema; fixes feature order for every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub numeric: Vec<NumericFeature>,
    pub categorical: Vec<CategoricalFeature>,
    pub phenotype_names: Vec<String>,
    #[serde(default)]
    pub inject_phenotypes: bool,
}

impl TabularSchema {
    pub fn validate(&self) -> Result<()> {
        if self.phenotype_names.len() != PHENOTYPE_COUNT {
            return Err(Error::Config(format!(
                "schema lists {} phenotypes, expected {PHENOTYPE_COUNT}",
                self.phenotype_names.len()
            )));
        }
        for required in REQUIRED_PHENOTYPES {
            if !self.phenotype_names.iter().any(|n| n == required) {
                return Err(Error::Config(format!("schema is missing phenotype {required}")));
            }
        }
        if self.numeric.iter().any(|f| f.std <= 0.0 || !f.std.is_finite() || !f.mean.is_finite()) {
            return Err(Error::Config("numeric feature with non-positive or non-finite std".into()));
        }
        if self.categorical.iter().any(|f| f.cardinality < 2) {
            return Err(Error::Config("categorical feature with cardinality < 2".into()));
        }
        Ok(())
    }

    /// Returns a copy with the 18 phenotype values appended as numeric
    /// features (the explicit-supervision tabular ablation). `stats` are
    /// per-phenotype (mean, std) computed on the training split.
    pub fn with_injected_phenotypes(&self, stats: &[(f64, f64)]) -> Result<TabularSchema> {
        if stats.len() != PHENOTYPE_COUNT {
            return Err(Error::Config(format!(
                "phenotype stats length {} != {PHENOTYPE_COUNT}",
                stats.len()
            )));
        }
        let mut schema = self.clone();
        schema.inject_phenotypes = true;
        for (name, &(mean, std)) in self.phenotype_names.iter().zip(stats) {
            schema.numeric.push(NumericFeature {
                name: name.clone(),
                mean,
                std: if std > 1e-12 { std } else { 1.0 },
            });
        }
        Ok(schema)
    }

    pub fn record_matches(&self, record: &TabularRecord) -> Result<()> {
        let n_injected = if self.inject_phenotypes { PHENOTYPE_COUNT } else { 0 };
        if record.numeric.len() + n_injected != self.numeric.len()
            || record.categorical.len() != self.categorical.len()
        {
            return Err(Error::Shape(format!(
                "record has {} numeric / {} categorical values, schema expects {} / {}",
                record.numeric.len(),
                record.categorical.len(),
                self.numeric.len() - n_injected,
                self.categorical.len()
            )));
        }
        for (value, feature) in record.categorical.iter().zip(&self.categorical) {
            if *value >= feature.cardinality {
                return Err(Error::Invalid(format!(
                    "feature {}: category index {} >= cardinality {}",
                    feature.name, value, feature.cardinality
                )));
            }
        }
        Ok(())
    }
}

/// 18 phenotype values in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeVector {
    pub values: Vec<f64>,
}

impl PhenotypeVector {
    pub fn validated(values: Vec<f64>) -> Result<Self> {
        if values.len() != PHENOTYPE_COUNT {
            return Err(Error::Invalid(format!(
                "phenotype length ≠ {PHENOTYPE_COUNT} (got {})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("phenotype vector contains NaN/Inf".into()));
        }
        Ok(PhenotypeVector { values })
    }
}

/// One subject's paired data. Modalities are optional so that subset loads
/// (e.g. localizer-only inference) can represent partial records; the full
/// loader rejects any record that is not completely paired.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub localizer: Option<ImageStack>,
    pub cmr: Option<ImageStack>,
    pub ecg: Option<EcgRecord>,
    pub tabular: Option<TabularRecord>,
    pub phenotypes: PhenotypeVector,
    pub split: Option<Split>,
}

impl SubjectRecord {
    pub fn localizer(&self) -> Result<&ImageStack> {
        self.localizer.as_ref().ok_or_else(|| self.missing("localizer"))
    }
    pub fn cmr(&self) -> Result<&ImageStack> {
        self.cmr.as_ref().ok_or_else(|| self.missing("cmr"))
    }
    pub fn ecg(&self) -> Result<&EcgRecord> {
        self.ecg.as_ref().ok_or_else(|| self.missing("ecg"))
    }
    pub fn tabular(&self) -> Result<&TabularRecord> {
        self.tabular.as_ref().ok_or_else(|| self.missing("tabular"))
    }
    fn missing(&self, kind: &str) -> Error {
        Error::Invalid(format!("subject {}: missing modality: {kind}", self.subject_id))
    }
}

/// Immutable collection of subject records plus the cohort schema.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub schema: TabularSchema,
}

impl Cohort {
    pub fn new(mut subjects: Vec<SubjectRecord>, schema: TabularSchema) -> Result<Self> {
        schema.validate()?;
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        for pair in subjects.windows(2) {
            if pair[0].subject_id == pair[1].subject_id {
                return Err(Error::Invalid(format!(
                    "duplicate subject_id {}",
                    pair[0].subject_id
                )));
            }
        }
        Ok(Cohort { subjects, schema })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects
            .binary_search_by(|s| s.subject_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.subjects[i])
    }

    pub fn split_ids(&self, split: Split) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|s| s.split == Some(split))
            .map(|s| s.subject_id.as_str())
            .collect()
    }

    pub fn split_subjects(&self, split: Split) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| s.split == Some(split)).collect()
    }

    /// Per-phenotype (mean, std) over the given split; std floors at 1e-12.
    pub fn phenotype_stats(&self, split: Split) -> Vec<(f64, f64)> {
        let subjects = self.split_subjects(split);
        let n = subjects.len().max(1) as f64;
        (0..PHENOTYPE_COUNT)
            .map(|k| {
                let mean = subjects.iter().map(|s| s.phenotypes.values[k]).sum::<f64>() / n;
                let var = subjects
                    .iter()
                    .map(|s| (s.phenotypes.values[k] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (mean, var.sqrt())
            })
            .collect()
    }
}

/// Assigns every subject to exactly one split.
///
/// Split sizes come from largest-remainder rounding of `fractions`
/// (remainder ties broken in train/val/test order); the assignment itself
/// is a pure function of the subject-id set, the fractions and the seed:
/// ids are sorted lexicographically, shuffled with a seeded Fisher–Yates,
/// and cut into consecutive ranges.
pub fn split_cohort(
    mut cohort: Cohort,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Cohort> {
    let (ft, fv, fs) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fs >= 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = cohort.len();
    let sizes = largest_remainder_sizes(n, &[ft, fv, fs]);

    let mut ids: Vec<String> = cohort.subjects.iter().map(|s| s.subject_id.clone()).collect();
    ids.sort();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }

    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id, split);
    }
    for subject in &mut cohort.subjects {
        subject.split = Some(assignment[subject.subject_id.as_str()]);
    }
    Ok(cohort)
}

/// Largest-remainder apportionment of `n` into `fractions.len()` buckets.
pub fn largest_remainder_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // stable sort keeps earlier buckets first on remainder ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for i in 0..n.saturating_sub(assigned) {
        sizes[order[i % order.len()]] += 1;
    }
    sizes
}

use rand::{Rng, SeedableRng};
