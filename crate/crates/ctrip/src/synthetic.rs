//! Synthetic paired-cohort generator.
//!
//! Every subject is driven by a small latent factor vector (heart size,
//! contractility, heart rate, sex) from which all three modalities and the
//! 18 phenotypes are synthesized, so cross-modal alignment has real shared
//! structure to find and phenotype regression has a known ceiling:
//!
//! - **localizer**: three slices of a two-concentric-ellipse "chamber"
//!   whose outer radius scales with heart size and whose wall thickness
//!   grows with the mass surrogate; the static snapshot is taken at a
//!   random cardiac phase, so contractility is only weakly visible;
//! - **cmr** (optional baseline input): the same geometry rendered at
//!   end-diastole / end-systole / mid-phase, which makes contraction
//!   directly observable;
//! - **ecg**: 12-lead sum-of-Gaussians PQRST train with period `60/HR`,
//!   R amplitude tied to heart size and T amplitude to contractility,
//!   plus a 0.3-amplitude 0.25 Hz baseline drift (below the cardiac band,
//!   so drift correction is separable) and Gaussian noise;
//! - **tabular**: anthropometrics correlated with heart size, resting
//!   heart rate, an activity level tied to contractility, and sex.
//!
//! Noise levels are chosen so single-modality supervised baselines land in
//! the mid-range while leaving headroom for multimodal gains.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    read_json, save_cohort, write_json, CategoricalFeature, Cohort, EcgRecord, ImageStack,
    NumericFeature, PhenotypeVector, SubjectRecord, TabularRecord, TabularSchema,
    DEFAULT_SAMPLING_RATE_HZ, ECG_LEADS, ECG_SECONDS, IMG_SIZE, PHENOTYPE_COUNT, SLICES,
};
use crate::{Error, Result};

pub const HEART_SIZE_RANGE: (f64, f64) = (0.5, 1.5);
pub const CONTRACTILITY_RANGE: (f64, f64) = (0.3, 0.8);
pub const HEART_RATE_RANGE: (f64, f64) = (50.0, 100.0);

pub const IMAGE_NOISE_STD: f64 = 0.08;
pub const ECG_NOISE_STD: f64 = 0.03;
pub const DRIFT_AMPLITUDE: f64 = 0.3;
pub const DRIFT_FREQ_HZ: f64 = 0.25;

/// Shared generative factors for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub heart_size: f64,
    pub contractility: f64,
    pub heart_rate_bpm: f64,
    pub sex: u8,
    /// Cardiac phase in [0, 1] captured by the static localizer snapshot.
    pub capture_phase: f64,
    /// Heart center offset in pixels, shared by all slices.
    pub center_dx: f64,
    pub center_dy: f64,
}

impl LatentFactors {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !in_range(self.heart_size, HEART_SIZE_RANGE)
            || !in_range(self.contractility, CONTRACTILITY_RANGE)
            || !in_range(self.heart_rate_bpm, HEART_RATE_RANGE)
            || self.sex > 1
            || !(0.0..=1.0).contains(&self.capture_phase)
        {
            return Err(Error::Invalid(format!("latent factors out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Canonical order of the 18 phenotypes.
pub fn phenotype_names() -> [&'static str; PHENOTYPE_COUNT] {
    [
        "LVEF[%]",
        "RVEF[%]",
        "LVM[g]",
        "RVEDV[mL]",
        "LVEDV[mL]",
        "LVESV[mL]",
        "LVSV[mL]",
        "LVCO[L/min]",
        "RVESV[mL]",
        "RVSV[mL]",
        "RVCO[L/min]",
        "LAV[mL]",
        "RAV[mL]",
        "WT[mm]",
        "HR[bpm]",
        "QRS[ms]",
        "PR[ms]",
        "LVMVR[g/mL]",
    ]
}

/// Per-phenotype noise standard deviations, in phenotype units.
pub const PHENOTYPE_NOISE_STD: [f64; PHENOTYPE_COUNT] = [
    2.0, 2.5, 8.0, 10.0, 8.0, 6.0, 5.0, 0.3, 6.0, 5.0, 0.3, 6.0, 6.0, 0.3, 1.5, 1.2, 1.5, 0.008,
];

// Per-subject RNG streams, derived from (cohort seed, subject index).
const STREAM_FACTORS: u64 = 0;
const STREAM_PHENOTYPES: u64 = 1;
const STREAM_IMAGE: u64 = 2;
const STREAM_ECG: u64 = 3;
const STREAM_TABULAR: u64 = 4;
const STREAM_CMR: u64 = 5;

fn stream_rng(seed: u64, subject_index: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(subject_index * 8 + stream);
    rng
}

/// Draws i.i.d. latent factors for `n` subjects; independent counter-based
/// stream per subject, so generation parallelizes without order effects.
pub fn sample_factors(n: usize, seed: u64) -> Vec<LatentFactors> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64, STREAM_FACTORS);
            LatentFactors {
                heart_size: rng.gen_range(HEART_SIZE_RANGE.0..=HEART_SIZE_RANGE.1),
                contractility: rng.gen_range(CONTRACTILITY_RANGE.0..=CONTRACTILITY_RANGE.1),
                heart_rate_bpm: rng.gen_range(HEART_RATE_RANGE.0..=HEART_RATE_RANGE.1),
                sex: rng.gen_range(0..2u8),
                capture_phase: rng.gen_range(0.0..=1.0),
                center_dx: rng.gen_range(-6.0..=6.0),
                center_dy: rng.gen_range(-6.0..=6.0),
            }
        })
        .collect()
}

fn noise(rng: &mut Option<&mut ChaCha20Rng>, std: f64) -> f64 {
    match rng {
        Some(r) => Normal::new(0.0, std).expect("positive std").sample(*r),
        None => 0.0,
    }
}

/// Deterministic phenotype functions of the factors plus optional noise.
///
/// The four headline phenotypes are pure: LVEF/RVEF are `100 *
/// contractility` and LVM/RVEDV are cubic in heart size, so switching the
/// noise off makes their defining equations exact.
pub fn synthesize_phenotypes(
    f: &LatentFactors,
    mut rng: Option<&mut ChaCha20Rng>,
) -> PhenotypeVector {
    let hs = f.heart_size;
    let hs2 = hs * hs;
    let hs3 = hs * hs * hs;
    let c = f.contractility;
    let hr = f.heart_rate_bpm;
    let sex = f.sex as f64;

    let means = [
        100.0 * c,                                         // LVEF
        100.0 * c,                                         // RVEF
        110.0 * hs3,                                       // LVM
        150.0 * hs3,                                       // RVEDV
        140.0 * hs3,                                       // LVEDV
        60.0 * hs3 + 40.0 * (1.0 - c),                     // LVESV
        80.0 * hs3 + 40.0 * c - 40.0,                      // LVSV
        0.05 * (80.0 * hs3 + 40.0 * c - 40.0) + 0.04 * hr, // LVCO
        65.0 * hs3 + 42.0 * (1.0 - c),                     // RVESV
        85.0 * hs3 + 42.0 * c - 42.0,                      // RVSV
        0.05 * (85.0 * hs3 + 42.0 * c - 42.0) + 0.04 * hr, // RVCO
        75.0 * hs2,                                        // LAV
        80.0 * hs2,                                        // RAV
        5.0 + 4.0 * hs + 0.8 * sex,                        // WT
        hr,                                                // HR
        70.0 + 18.0 * hs + 6.0 * sex,                      // QRS
        160.0 - 0.4 * (hr - 75.0),                         // PR
        0.80 + 0.10 * hs - 0.10 * c,                       // LVMVR
    ];
    let values = means
        .iter()
        .zip(PHENOTYPE_NOISE_STD)
        .map(|(&m, std)| m + noise(&mut rng, std))
        .collect();
    PhenotypeVector { values }
}

// Geometry shared by rendering and the heart-region mask.
struct SliceGeometry {
    cx: f64,
    cy: f64,
    a_out: f64,
    b_out: f64,
    a_in: f64,
    b_in: f64,
}

fn slice_geometry(f: &LatentFactors, slice: usize, phase: f64) -> SliceGeometry {
    let scale = [1.0, 0.9, 0.8][slice];
    let a_out = 40.0 * f.heart_size * scale;
    let b_out = 32.0 * f.heart_size * scale;
    let wall = 5.0 + 5.0 * f.heart_size;
    let contraction = 1.0 - 0.35 * f.contractility * phase;
    SliceGeometry {
        cx: IMG_SIZE as f64 / 2.0 + f.center_dx,
        cy: IMG_SIZE as f64 / 2.0 + f.center_dy,
        a_out,
        b_out,
        a_in: (a_out - wall).max(2.0) * contraction,
        b_in: (b_out - wall).max(2.0) * contraction,
    }
}

fn render_stack(
    f: &LatentFactors,
    phases: [f64; SLICES],
    mut rng: Option<&mut ChaCha20Rng>,
) -> ImageStack {
    let mut voxels = Array3::<f32>::zeros((SLICES, IMG_SIZE, IMG_SIZE));
    // soft-edged ellipse membership in [0, 1]
    let coverage = |x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64| -> f64 {
        let d = ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2);
        ((1.0 - d) / 0.15 + 0.5).clamp(0.0, 1.0)
    };
    for s in 0..SLICES {
        let geo = slice_geometry(f, s, phases[s]);
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                let outer = coverage(x as f64, y as f64, geo.cx, geo.cy, geo.a_out, geo.b_out);
                let inner = coverage(x as f64, y as f64, geo.cx, geo.cy, geo.a_in, geo.b_in);
                let value = 0.12 + 0.88 * outer - 0.65 * inner;
                voxels[[s, y, x]] = (value + noise(&mut rng, IMAGE_NOISE_STD)) as f32;
            }
        }
    }
    ImageStack::normalize(voxels).expect("finite synthetic stack")
}

/// Static localizer stack: all slices share the subject's capture phase.
pub fn render_localizer(f: &LatentFactors, rng: Option<&mut ChaCha20Rng>) -> ImageStack {
    render_stack(f, [f.capture_phase; SLICES], rng)
}

/// Cine stand-in: end-diastole, end-systole and mid-phase frames of the
/// middle slice geometry, so frame differences encode contractility.
pub fn render_cmr(f: &LatentFactors, rng: Option<&mut ChaCha20Rng>) -> ImageStack {
    let mut mid = f.clone();
    mid.capture_phase = 0.0;
    render_stack(&mid, [0.0, 1.0, 0.5], rng)
}

/// Boolean mask of the heart region (largest slice's outer ellipse).
pub fn heart_mask(f: &LatentFactors) -> Array2<bool> {
    let geo = slice_geometry(f, 0, 0.0);
    Array2::from_shape_fn((IMG_SIZE, IMG_SIZE), |(y, x)| {
        ((x as f64 - geo.cx) / geo.a_out).powi(2) + ((y as f64 - geo.cy) / geo.b_out).powi(2)
            <= 1.0
    })
}

/// Pixels above `fraction * max`; tracks the chamber cross-section area.
///
/// The threshold is relative to the stack maximum because per-stack
/// normalization rescales absolute intensities with heart size.
pub fn bright_pixel_count(stack: &ImageStack, fraction: f32) -> usize {
    let max = stack.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let threshold = fraction * max;
    stack.voxels.iter().filter(|&&v| v > threshold).count()
}

/// 12-lead PQRST train with baseline drift; `drift_corrected` is false.
pub fn synthesize_ecg(f: &LatentFactors, mut rng: Option<&mut ChaCha20Rng>) -> EcgRecord {
    const LEAD_SCALE: [f64; ECG_LEADS] =
        [0.6, 0.8, 1.0, -0.4, 0.5, 0.9, 0.7, 1.0, 0.95, 0.85, 0.75, 0.65];
    let fs = DEFAULT_SAMPLING_RATE_HZ as f64;
    let timesteps = ECG_SECONDS * DEFAULT_SAMPLING_RATE_HZ as usize;
    let period = 60.0 / f.heart_rate_bpm;
    let r_amp = 0.6 + 0.5 * f.heart_size;
    let t_amp = 0.1 + 0.5 * f.contractility;
    // (position within beat, width seconds, amplitude)
    let waves = [
        (0.18, 0.025, 0.15),
        (0.36, 0.010, -0.12),
        (0.40, 0.012, r_amp),
        (0.44, 0.010, -0.25),
        (0.62, 0.030, t_amp),
    ];

    let n_beats = (ECG_SECONDS as f64 / period).ceil() as usize + 1;
    let mut template = vec![0.0f64; timesteps];
    for beat in 0..n_beats {
        let t0 = beat as f64 * period;
        for &(frac, width, amp) in &waves {
            let center = t0 + frac * period;
            let lo = (((center - 4.0 * width) * fs).floor().max(0.0)) as usize;
            let hi = ((center + 4.0 * width) * fs).ceil().min(timesteps as f64) as usize;
            for i in lo..hi {
                let t = i as f64 / fs;
                template[i] += amp * (-(t - center).powi(2) / (2.0 * width * width)).exp();
            }
        }
    }

    let mut samples = Array2::<f32>::zeros((ECG_LEADS, timesteps));
    for lead in 0..ECG_LEADS {
        let phase = match rng {
            Some(ref mut r) => r.gen_range(0.0..std::f64::consts::TAU),
            None => 0.7 * lead as f64,
        };
        for i in 0..timesteps {
            let t = i as f64 / fs;
            let drift =
                DRIFT_AMPLITUDE * (std::f64::consts::TAU * DRIFT_FREQ_HZ * t + phase).sin();
            let value = LEAD_SCALE[lead] * template[i] + drift + noise(&mut rng, ECG_NOISE_STD);
            samples[[lead, i]] = value as f32;
        }
    }
    EcgRecord { samples, sampling_rate_hz: DEFAULT_SAMPLING_RATE_HZ, drift_corrected: false }
}

/// Raw tabular values in the order of [`tabular_schema`].
pub fn make_tabular(f: &LatentFactors, mut rng: Option<&mut ChaCha20Rng>) -> TabularRecord {
    let hs = f.heart_size;
    let hr = f.heart_rate_bpm;
    let sex = f.sex as f64;
    let numeric = vec![
        22.0 + 6.0 * (hs - 1.0) + noise(&mut rng, 0.8),               // bmi
        1.75 + 0.5 * (hs - 1.0) + noise(&mut rng, 0.05),              // bsa_m2
        75.0 + 30.0 * (hs - 1.0) + noise(&mut rng, 3.0),              // weight_kg
        164.0 + 10.0 * (hs - 1.0) + 8.0 * sex + noise(&mut rng, 4.0), // height_cm
        120.0 + 8.0 * (hs - 1.0) + noise(&mut rng, 6.0),              // sbp_mmhg
        78.0 + noise(&mut rng, 5.0),                                  // dbp_mmhg
        hr + noise(&mut rng, 2.0),                                    // resting_hr_bpm
        1500.0 + 400.0 * (hs - 1.0) + 3.0 * (hr - 75.0) + noise(&mut rng, 50.0), // metabolic_rate
        70.0 + 18.0 * hs + 6.0 * sex + noise(&mut rng, 3.0),          // qrs_ms
        160.0 - 0.3 * (hr - 75.0) + noise(&mut rng, 5.0),             // pr_ms
    ];
    let activity_score = f.contractility + noise(&mut rng, 0.07);
    let activity = if activity_score < 0.4667 {
        0
    } else if activity_score < 0.6333 {
        1
    } else {
        2
    };
    let uniform = |rng: &mut Option<&mut ChaCha20Rng>, n: usize| match rng {
        Some(r) => r.gen_range(0..n),
        None => 0,
    };
    let categorical = vec![
        f.sex as usize,
        uniform(&mut rng, 3), // smoking_status
        activity,             // activity_level
        uniform(&mut rng, 3), // alcohol_use
        uniform(&mut rng, 2), // on_medication
    ];
    TabularRecord { numeric, categorical }
}

/// Cohort-level schema with analytic population statistics (independent of
/// the realized sample, so z-normalization is stable across cohort sizes).
pub fn tabular_schema() -> TabularSchema {
    let u: f64 = 1.0 / 12.0; // variance of U[0,1]; scaled by squared range below
    let numeric = vec![
        ("bmi", 22.0, (36.0 * u + 0.64).sqrt()),
        ("bsa_m2", 1.75, (0.25 * u + 0.0025).sqrt()),
        ("weight_kg", 75.0, (900.0 * u + 9.0).sqrt()),
        ("height_cm", 168.0, (100.0 * u + 16.0 + 16.0).sqrt()),
        ("sbp_mmhg", 120.0, (64.0 * u + 36.0).sqrt()),
        ("dbp_mmhg", 78.0, 5.0),
        ("resting_hr_bpm", 75.0, (2500.0 * u + 4.0).sqrt()),
        ("metabolic_rate_kcal", 1500.0, (160000.0 * u + 9.0 * 2500.0 * u + 2500.0).sqrt()),
        ("qrs_ms", 91.0, (324.0 * u + 9.0 * 0.25 + 9.0).sqrt()),
        ("pr_ms", 160.0, (0.09 * 2500.0 * u + 25.0).sqrt()),
    ];
    TabularSchema {
        numeric: numeric
            .into_iter()
            .map(|(name, mean, std)| NumericFeature { name: name.into(), mean, std })
            .collect(),
        categorical: [
            ("sex", 2),
            ("smoking_status", 3),
            ("activity_level", 3),
            ("alcohol_use", 3),
            ("on_medication", 2),
        ]
        .into_iter()
        .map(|(name, cardinality)| CategoricalFeature { name: name.into(), cardinality })
        .collect(),
        phenotype_names: phenotype_names().iter().map(|s| s.to_string()).collect(),
        inject_phenotypes: false,
    }
}

/// Builds one complete subject from its factors; total over valid factors
/// and bit-deterministic in `(cohort_seed, subject_index)`.
pub fn generate_subject(
    f: &LatentFactors,
    subject_index: u64,
    cohort_seed: u64,
) -> Result<SubjectRecord> {
    f.validate()?;
    let mut pheno_rng = stream_rng(cohort_seed, subject_index, STREAM_PHENOTYPES);
    let mut image_rng = stream_rng(cohort_seed, subject_index, STREAM_IMAGE);
    let mut ecg_rng = stream_rng(cohort_seed, subject_index, STREAM_ECG);
    let mut tab_rng = stream_rng(cohort_seed, subject_index, STREAM_TABULAR);
    let mut cmr_rng = stream_rng(cohort_seed, subject_index, STREAM_CMR);
    Ok(SubjectRecord {
        subject_id: format!("sub_{subject_index:05}"),
        localizer: Some(render_localizer(f, Some(&mut image_rng))),
        cmr: Some(render_cmr(f, Some(&mut cmr_rng))),
        ecg: Some(synthesize_ecg(f, Some(&mut ecg_rng))),
        tabular: Some(make_tabular(f, Some(&mut tab_rng))),
        phenotypes: synthesize_phenotypes(f, Some(&mut pheno_rng)),
        split: None,
    })
}

/// Generates `n` subjects without touching the filesystem.
pub fn generate_cohort_in_memory(n: usize, seed: u64) -> Result<Cohort> {
    if n < 1 {
        return Err(Error::Config("cohort size must be >= 1".into()));
    }
    use rayon::prelude::*;
    let factors = sample_factors(n, seed);
    let subjects: Vec<SubjectRecord> = factors
        .par_iter()
        .enumerate()
        .map(|(i, f)| generate_subject(f, i as u64, seed))
        .collect::<Result<_>>()?;
    Cohort::new(subjects, tabular_schema())
}

/// Generation settings recorded next to the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub n: usize,
    pub seed: u64,
    pub heart_size_range: (f64, f64),
    pub contractility_range: (f64, f64),
    pub heart_rate_range: (f64, f64),
    pub phenotype_noise_std: Vec<f64>,
    pub image_noise_std: f64,
    pub ecg_noise_std: f64,
    pub drift_amplitude: f64,
    pub drift_freq_hz: f64,
}

/// Generates a cohort and writes the canonical directory layout plus
/// `cohort_manifest.json` and the diagnostic `latent_factors.json`.
pub fn generate_cohort(n: usize, seed: u64, root: &Path) -> Result<Cohort> {
    let cohort = generate_cohort_in_memory(n, seed)?;
    save_cohort(&cohort, root)?;

    let manifest = CohortManifest {
        n,
        seed,
        heart_size_range: HEART_SIZE_RANGE,
        contractility_range: CONTRACTILITY_RANGE,
        heart_rate_range: HEART_RATE_RANGE,
        phenotype_noise_std: PHENOTYPE_NOISE_STD.to_vec(),
        image_noise_std: IMAGE_NOISE_STD,
        ecg_noise_std: ECG_NOISE_STD,
        drift_amplitude: DRIFT_AMPLITUDE,
        drift_freq_hz: DRIFT_FREQ_HZ,
    };
    write_json(&root.join("cohort_manifest.json"), &manifest)?;

    let factors = sample_factors(n, seed);
    let factor_map: std::collections::BTreeMap<String, &LatentFactors> = factors
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("sub_{i:05}"), f))
        .collect();
    write_json(&root.join("latent_factors.json"), &factor_map)?;
    Ok(cohort)
}

/// Reads back the diagnostic factor file written by [`generate_cohort`].
pub fn load_latent_factors(
    root: &Path,
) -> Result<std::collections::BTreeMap<String, LatentFactors>> {
    read_json(&root.join("latent_factors.json"))
}
