//! Converts each modality into a token sequence, applies random masking,
//! and inverts patching for reconstruction.
//!
//! Images become non-overlapping square patches with slices as channels
//! (one spatial token grid, 196 tokens at 224² / patch 16); ECG leads are
//! cut into non-overlapping 1D windows ordered lead-major; tabular records
//! become one learned token per feature via [`FeatureTokenizer`].

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data_model::{
    EcgRecord, ImageStack, Modality, PhenotypeVector, TabularRecord, TabularSchema, ECG_LEADS,
    IMG_SIZE, PHENOTYPE_COUNT, SLICES,
};
use crate::nn::{FeatureTokenizer, TokenizerCache};
use crate::{Error, Result};

/// Modality-agnostic sequence of embedded tokens.
///
/// `positions[i]` is token `i`'s original position; constructors keep
/// positions unique and sorted ascending, and `tokens` row `i` belongs to
/// `positions[i]` even if a caller reorders rows consistently.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<usize>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>, positions: Vec<usize>, modality: Modality) -> Result<Self> {
        if tokens.nrows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} positions",
                tokens.nrows(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("positions must be unique and sorted ascending".into()));
        }
        Ok(TokenSequence { tokens, positions, modality })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Partition of token positions into visible and masked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub num_tokens: usize,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        self.masked_idx.len() as f64 / self.num_tokens as f64
    }

    /// Checks the partition property: visible ∪ masked = 0..n, disjoint.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0u8; self.num_tokens];
        for &i in self.visible_idx.iter().chain(&self.masked_idx) {
            if i >= self.num_tokens {
                return false;
            }
            seen[i] += 1;
        }
        self.visible_idx.len() + self.masked_idx.len() == self.num_tokens
            && seen.iter().all(|&c| c == 1)
    }
}

/// Uniform sample without replacement of `round(ratio * num_tokens)`
/// masked positions; deterministic under a fixed rng state.
pub fn sample_mask(num_tokens: usize, ratio: f64, rng: &mut ChaCha20Rng) -> Result<MaskPlan> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Invalid(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let k = (ratio * num_tokens as f64).round() as usize;
    if k == 0 || k >= num_tokens {
        return Err(Error::Invalid(format!(
            "mask ratio {ratio} leaves {k} of {num_tokens} tokens masked"
        )));
    }
    // partial Fisher-Yates: first k entries are the masked sample
    let mut perm: Vec<usize> = (0..num_tokens).collect();
    for i in 0..k {
        let j = rng.gen_range(i..num_tokens);
        perm.swap(i, j);
    }
    let mut masked_idx: Vec<usize> = perm[..k].to_vec();
    let mut visible_idx: Vec<usize> = perm[k..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan { visible_idx, masked_idx, num_tokens })
}

/// Splits a stack into non-overlapping `patch_size`² patches, slices as
/// channels, flattened row-major as (py, px, slice).
pub fn patchify_image(stack: &ImageStack, patch_size: usize) -> Result<TokenSequence> {
    if patch_size == 0 || IMG_SIZE % patch_size != 0 {
        return Err(Error::Invalid(format!("{IMG_SIZE} not divisible by {patch_size}")));
    }
    let grid = IMG_SIZE / patch_size;
    let num_tokens = grid * grid;
    let token_dim = patch_size * patch_size * SLICES;
    let mut tokens = Array2::zeros((num_tokens, token_dim));
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            let mut d = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for s in 0..SLICES {
                        tokens[[token, d]] =
                            stack.voxels[[s, gy * patch_size + py, gx * patch_size + px]] as f64;
                        d += 1;
                    }
                }
            }
        }
    }
    TokenSequence::new(tokens, (0..num_tokens).collect(), Modality::Localizer)
}

/// Exact inverse of [`patchify_image`]; requires every position present.
pub fn unpatchify_image(seq: &TokenSequence, patch_size: usize) -> Result<ImageStack> {
    if patch_size == 0 || IMG_SIZE % patch_size != 0 {
        return Err(Error::Invalid(format!("{IMG_SIZE} not divisible by {patch_size}")));
    }
    let grid = IMG_SIZE / patch_size;
    let num_tokens = grid * grid;
    let token_dim = patch_size * patch_size * SLICES;
    check_complete(seq, num_tokens, token_dim)?;

    let mut voxels = Array3::zeros((SLICES, IMG_SIZE, IMG_SIZE));
    for (row, &position) in seq.positions.iter().enumerate() {
        let (gy, gx) = (position / grid, position % grid);
        let mut d = 0;
        for py in 0..patch_size {
            for px in 0..patch_size {
                for s in 0..SLICES {
                    voxels[[s, gy * patch_size + py, gx * patch_size + px]] =
                        seq.tokens[[row, d]] as f32;
                    d += 1;
                }
            }
        }
    }
    Ok(ImageStack { voxels })
}

/// Per-lead segmentation into `timesteps / patch_len` windows, tokens
/// ordered lead-major; token `lead * windows + w` has position itself.
pub fn patchify_ecg(record: &EcgRecord, patch_len: usize) -> Result<TokenSequence> {
    let timesteps = record.timesteps();
    if patch_len == 0 || timesteps % patch_len != 0 {
        return Err(Error::Invalid(format!("{timesteps} not divisible by {patch_len}")));
    }
    let windows = timesteps / patch_len;
    let num_tokens = ECG_LEADS * windows;
    let mut tokens = Array2::zeros((num_tokens, patch_len));
    for lead in 0..ECG_LEADS {
        for w in 0..windows {
            for i in 0..patch_len {
                tokens[[lead * windows + w, i]] = record.samples[[lead, w * patch_len + i]] as f64;
            }
        }
    }
    TokenSequence::new(tokens, (0..num_tokens).collect(), Modality::Ecg)
}

/// Exact inverse of [`patchify_ecg`].
pub fn unpatchify_ecg(
    seq: &TokenSequence,
    patch_len: usize,
    sampling_rate_hz: u32,
) -> Result<EcgRecord> {
    let timesteps = crate::data_model::ECG_SECONDS * sampling_rate_hz as usize;
    if patch_len == 0 || timesteps % patch_len != 0 {
        return Err(Error::Invalid(format!("{timesteps} not divisible by {patch_len}")));
    }
    let windows = timesteps / patch_len;
    check_complete(seq, ECG_LEADS * windows, patch_len)?;

    let mut samples = Array2::zeros((ECG_LEADS, timesteps));
    for (row, &position) in seq.positions.iter().enumerate() {
        let (lead, w) = (position / windows, position % windows);
        for i in 0..patch_len {
            samples[[lead, w * patch_len + i]] = seq.tokens[[row, i]] as f32;
        }
    }
    Ok(EcgRecord { samples, sampling_rate_hz, drift_corrected: false })
}

fn check_complete(seq: &TokenSequence, num_tokens: usize, token_dim: usize) -> Result<()> {
    if seq.token_dim() != token_dim {
        return Err(Error::Shape(format!(
            "token dim {} does not match expected {token_dim}",
            seq.token_dim()
        )));
    }
    if seq.num_tokens() != num_tokens {
        return Err(Error::Invalid(format!(
            "sequence has {} of {num_tokens} tokens; all positions required",
            seq.num_tokens()
        )));
    }
    let mut seen = vec![false; num_tokens];
    for &p in &seq.positions {
        if p >= num_tokens || seen[p] {
            return Err(Error::Invalid(format!("position {p} out of range or duplicated")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Z-normalized numeric values (with phenotypes appended when the schema
/// injects them) and categorical indices for one record.
pub fn tabular_inputs(
    record: &TabularRecord,
    phenotypes: Option<&PhenotypeVector>,
    schema: &TabularSchema,
) -> Result<(Vec<f64>, Vec<usize>)> {
    schema.record_matches(record)?;
    let mut numeric = Vec::with_capacity(schema.numeric.len());
    for (value, feature) in record.numeric.iter().zip(&schema.numeric) {
        numeric.push((value - feature.mean) / feature.std);
    }
    if schema.inject_phenotypes {
        let phenotypes = phenotypes.ok_or_else(|| {
            Error::Invalid("schema injects phenotypes but none were provided".into())
        })?;
        let injected = &schema.numeric[schema.numeric.len() - PHENOTYPE_COUNT..];
        for (value, feature) in phenotypes.values.iter().zip(injected) {
            numeric.push((value - feature.mean) / feature.std);
        }
    }
    Ok((numeric, record.categorical.clone()))
}

/// One learned token per feature, in schema order (numeric then
/// categorical). The embedding tables live in `tokenizer` and train with
/// the encoder.
pub fn tokenize_tabular(
    record: &TabularRecord,
    phenotypes: Option<&PhenotypeVector>,
    schema: &TabularSchema,
    tokenizer: &FeatureTokenizer,
) -> Result<(TokenSequence, TokenizerCache)> {
    let (numeric, categorical) = tabular_inputs(record, phenotypes, schema)?;
    let (tokens, cache) = tokenizer.forward(&numeric, &categorical)?;
    let n = tokens.nrows();
    Ok((TokenSequence::new(tokens, (0..n).collect(), Modality::Tabular)?, cache))
}

/// Subtracts a per-lead moving-median trend (0.6 s window, reflected-edge
/// padding) and marks the record drift-corrected.
pub fn correct_baseline_drift(record: &EcgRecord) -> EcgRecord {
    let window = (0.6 * record.sampling_rate_hz as f64).round() as usize;
    let mut samples = record.samples.clone();
    for mut lead in samples.rows_mut() {
        let signal: Vec<f64> = lead.iter().map(|&v| v as f64).collect();
        let trend = moving_median(&signal, window);
        for (v, t) in lead.iter_mut().zip(trend) {
            *v = (*v as f64 - t) as f32;
        }
    }
    EcgRecord { samples, sampling_rate_hz: record.sampling_rate_hz, drift_corrected: true }
}

/// Sliding-window median with reflected-edge padding.
///
/// Window covering index `i` spans padded `[i - (w-1)/2, i + w/2]`; even
/// windows take the mean of the two middle order statistics.
pub fn moving_median(signal: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1 && !signal.is_empty());
    let window = window.min(2 * signal.len().saturating_sub(1)).max(1);
    let n = signal.len();
    let pad_lo = (window - 1) / 2;
    let pad_hi = window / 2;
    // scipy-style 'reflect': d c b | a b c d ... (edge not duplicated)
    let reflect = |i: isize| -> f64 {
        let n = n as isize;
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= n {
            j = 2 * n - 2 - j;
        }
        signal[j as usize]
    };

    let mut heaps = MedianHeaps::new();
    for i in -(pad_lo as isize)..=(pad_hi as isize) {
        heaps.insert(reflect(i));
    }
    let mut out = Vec::with_capacity(n);
    out.push(heaps.median());
    for i in 1..n as isize {
        heaps.insert(reflect(i + pad_hi as isize));
        heaps.remove(reflect(i - 1 - pad_lo as isize));
        out.push(heaps.median());
    }
    out
}

/// Two-heap running median with lazy deletion.
struct MedianHeaps {
    lo: std::collections::BinaryHeap<OrdF64>,
    hi: std::collections::BinaryHeap<std::cmp::Reverse<OrdF64>>,
    delayed: std::collections::HashMap<u64, usize>,
    lo_len: usize,
    hi_len: usize,
}

#[derive(PartialEq, Clone, Copy)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl MedianHeaps {
    fn new() -> Self {
        MedianHeaps {
            lo: Default::default(),
            hi: Default::default(),
            delayed: Default::default(),
            lo_len: 0,
            hi_len: 0,
        }
    }

    fn insert(&mut self, x: f64) {
        if self.lo_len == 0 || x <= self.peek_lo() {
            self.lo.push(OrdF64(x));
            self.lo_len += 1;
        } else {
            self.hi.push(std::cmp::Reverse(OrdF64(x)));
            self.hi_len += 1;
        }
        self.rebalance();
    }

    fn remove(&mut self, x: f64) {
        *self.delayed.entry(x.to_bits()).or_insert(0) += 1;
        if self.lo_len > 0 && x <= self.peek_lo() {
            self.lo_len -= 1;
            self.prune_lo();
        } else {
            self.hi_len -= 1;
            self.prune_hi();
        }
        self.rebalance();
    }

    fn peek_lo(&self) -> f64 {
        self.lo.peek().expect("lo non-empty").0
    }

    fn prune_lo(&mut self) {
        while let Some(top) = self.lo.peek() {
            let bits = top.0.to_bits();
            match self.delayed.get_mut(&bits) {
                Some(count) => {
                    *count -= 1;
                    if *count == 0 {
                        self.delayed.remove(&bits);
                    }
                    self.lo.pop();
                }
                None => break,
            }
        }
    }

    fn prune_hi(&mut self) {
        while let Some(std::cmp::Reverse(top)) = self.hi.peek() {
            let bits = top.0.to_bits();
            match self.delayed.get_mut(&bits) {
                Some(count) => {
                    *count -= 1;
                    if *count == 0 {
                        self.delayed.remove(&bits);
                    }
                    self.hi.pop();
                }
                None => break,
            }
        }
    }

    fn rebalance(&mut self) {
        // invariant: lo_len == hi_len or lo_len == hi_len + 1
        while self.lo_len > self.hi_len + 1 {
            self.prune_lo();
            let top = self.lo.pop().expect("lo non-empty");
            self.lo_len -= 1;
            self.hi.push(std::cmp::Reverse(top));
            self.hi_len += 1;
            self.prune_lo();
        }
        while self.hi_len > self.lo_len {
            self.prune_hi();
            let std::cmp::Reverse(top) = self.hi.pop().expect("hi non-empty");
            self.hi_len -= 1;
            self.lo.push(top);
            self.lo_len += 1;
            self.prune_hi();
        }
    }

    fn median(&mut self) -> f64 {
        self.prune_lo();
        self.prune_hi();
        if (self.lo_len + self.hi_len) % 2 == 1 {
            self.peek_lo()
        } else {
            let hi = self.hi.peek().expect("hi non-empty").0 .0;
            (self.peek_lo() + hi) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::DEFAULT_SAMPLING_RATE_HZ;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn random_stack(rng: &mut ChaCha20Rng) -> ImageStack {
        let voxels = Array3::from_shape_fn((SLICES, IMG_SIZE, IMG_SIZE), |_| rng.gen::<f32>());
        ImageStack { voxels }
    }

    fn random_ecg(rng: &mut ChaCha20Rng) -> EcgRecord {
        let samples = Array2::from_shape_fn((ECG_LEADS, 5000), |_| rng.gen::<f32>());
        EcgRecord { samples, sampling_rate_hz: DEFAULT_SAMPLING_RATE_HZ, drift_corrected: false }
    }

    #[test]
    fn image_patch_arithmetic() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let stack = random_stack(&mut rng);
        let seq = patchify_image(&stack, 16).unwrap();
        assert_eq!((seq.num_tokens(), seq.token_dim()), (196, 768));
        let seq = patchify_image(&stack, 14).unwrap();
        assert_eq!((seq.num_tokens(), seq.token_dim()), (256, 588));
        let err = patchify_image(&stack, 15).unwrap_err();
        assert!(err.to_string().contains("224 not divisible by 15"));
    }

    #[test]
    fn ecg_patch_arithmetic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ecg = random_ecg(&mut rng);
        let seq = patchify_ecg(&ecg, 100).unwrap();
        assert_eq!((seq.num_tokens(), seq.token_dim()), (600, 100));
        let seq = patchify_ecg(&ecg, 250).unwrap();
        assert_eq!((seq.num_tokens(), seq.token_dim()), (240, 250));
        assert!(patchify_ecg(&ecg, 300).is_err());
    }

    #[test]
    fn image_round_trip_bit_exact_even_permuted() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let stack = random_stack(&mut rng);
        let seq = patchify_image(&stack, 16).unwrap();
        assert_eq!(unpatchify_image(&seq, 16).unwrap().voxels, stack.voxels);

        // shuffle rows and carry positions along: assembly is position-keyed
        let mut shuffled = seq.clone();
        let mut order: Vec<usize> = (0..seq.num_tokens()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (new_row, &old_row) in order.iter().enumerate() {
            shuffled.tokens.row_mut(new_row).assign(&seq.tokens.row(old_row));
            shuffled.positions[new_row] = seq.positions[old_row];
        }
        assert_eq!(unpatchify_image(&shuffled, 16).unwrap().voxels, stack.voxels);

        // missing token 0 is rejected
        let missing = TokenSequence {
            tokens: seq.tokens.slice(ndarray::s![1.., ..]).to_owned(),
            positions: seq.positions[1..].to_vec(),
            modality: Modality::Localizer,
        };
        assert!(unpatchify_image(&missing, 16).is_err());
    }

    #[test]
    fn ecg_round_trip_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ecg = random_ecg(&mut rng);
        for patch_len in [100, 250, 500] {
            let seq = patchify_ecg(&ecg, patch_len).unwrap();
            let back = unpatchify_ecg(&seq, patch_len, DEFAULT_SAMPLING_RATE_HZ).unwrap();
            assert_eq!(back.samples, ecg.samples);
        }
    }

    #[test]
    fn mask_arithmetic_and_partition() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let plan = sample_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!((plan.masked_idx.len(), plan.visible_idx.len()), (147, 49));
        assert!(plan.is_partition());

        let plan = sample_mask(600, 0.75, &mut rng).unwrap();
        assert_eq!((plan.masked_idx.len(), plan.visible_idx.len()), (450, 150));

        assert!(sample_mask(196, 0.0, &mut rng).is_err());
        assert!(sample_mask(196, 1.0, &mut rng).is_err());
        assert!(sample_mask(196, -0.1, &mut rng).is_err());
        assert!(sample_mask(10, 0.01, &mut rng).is_err(), "rounds to zero masked");
    }

    #[test]
    fn mask_partition_randomized_sweep() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.gen_range(4..800);
            let ratio = rng.gen_range(0.05..0.95);
            match sample_mask(n, ratio, &mut rng) {
                Ok(plan) => {
                    assert!(plan.is_partition());
                    assert_eq!(plan.masked_idx.len(), (ratio * n as f64).round() as usize);
                }
                Err(_) => {
                    let k = (ratio * n as f64).round() as usize;
                    assert!(k == 0 || k >= n);
                }
            }
        }
    }

    #[test]
    fn mask_frequency_is_uniform_chi_squared() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (n, draws) = (196usize, 10_000usize);
        let mut counts = vec![0f64; n];
        for _ in 0..draws {
            for &i in &sample_mask(n, 0.75, &mut rng).unwrap().masked_idx {
                counts[i] += 1.0;
            }
        }
        let expected = draws as f64 * 147.0 / 196.0;
        let stat: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi² = {stat:.1}, p = {p:.4}");
    }

    #[test]
    fn moving_median_matches_naive() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for (n, window) in [(50usize, 7usize), (80, 12), (200, 31), (40, 300)] {
            let signal: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = moving_median(&signal, window);
            let slow = naive_moving_median(&signal, window.min(2 * (n - 1)).max(1));
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "window {window}: {a} vs {b}");
            }
        }
    }

    fn naive_moving_median(signal: &[f64], window: usize) -> Vec<f64> {
        let n = signal.len() as isize;
        let pad_lo = ((window - 1) / 2) as isize;
        let pad_hi = (window / 2) as isize;
        let reflect = |mut j: isize| -> f64 {
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * n - 2 - j;
            }
            signal[j as usize]
        };
        (0..n)
            .map(|i| {
                let mut w: Vec<f64> = (i - pad_lo..=i + pad_hi).map(reflect).collect();
                w.sort_by(f64::total_cmp);
                if w.len() % 2 == 1 {
                    w[w.len() / 2]
                } else {
                    (w[w.len() / 2 - 1] + w[w.len() / 2]) / 2.0
                }
            })
            .collect()
    }

    #[test]
    fn drift_correction_removes_sinusoid() {
        let fs = DEFAULT_SAMPLING_RATE_HZ as f64;
        let samples = Array2::from_shape_fn((ECG_LEADS, 5000), |(lead, i)| {
            let t = i as f64 / fs;
            (0.3 * (std::f64::consts::TAU * 0.25 * t + 0.5 * lead as f64).sin()) as f32
        });
        let record = EcgRecord {
            samples,
            sampling_rate_hz: DEFAULT_SAMPLING_RATE_HZ,
            drift_corrected: false,
        };
        let corrected = correct_baseline_drift(&record);
        assert!(corrected.drift_corrected);
        for lead in 0..ECG_LEADS {
            let rms_in = rms(record.samples.row(lead));
            let rms_out = rms(corrected.samples.row(lead));
            assert!(rms_out < 0.1 * rms_in, "lead {lead}: {rms_out} vs {rms_in}");
            let mean = corrected.samples.row(lead).iter().map(|&v| v as f64).sum::<f64>()
                / 5000.0;
            assert!(mean.abs() < 0.01, "lead {lead} mean {mean}");
        }
    }

    fn rms(row: ndarray::ArrayView1<f32>) -> f64 {
        (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64).sqrt()
    }

    #[test]
    fn drift_correction_preserves_zero_and_qrs_peak() {
        let zeros = EcgRecord {
            samples: Array2::zeros((ECG_LEADS, 5000)),
            sampling_rate_hz: DEFAULT_SAMPLING_RATE_HZ,
            drift_corrected: false,
        };
        let corrected = correct_baseline_drift(&zeros);
        assert!(corrected.samples.iter().all(|&v| v == 0.0));

        // noise-free template with deterministic drift; R peak within 5%
        let f = crate::synthetic::LatentFactors {
            heart_size: 1.2,
            contractility: 0.6,
            heart_rate_bpm: 72.0,
            sex: 0,
            capture_phase: 0.0,
            center_dx: 0.0,
            center_dy: 0.0,
        };
        let with_drift = crate::synthetic::synthesize_ecg(&f, None);
        let fs = DEFAULT_SAMPLING_RATE_HZ as f64;
        let corrected = correct_baseline_drift(&with_drift);
        for lead in [0usize, 2, 7] {
            let clean_peak = (0..5000)
                .map(|i| {
                    let t = i as f64 / fs;
                    let drift = crate::synthetic::DRIFT_AMPLITUDE
                        * (std::f64::consts::TAU * crate::synthetic::DRIFT_FREQ_HZ * t
                            + 0.7 * lead as f64)
                            .sin();
                    with_drift.samples[[lead, i]] as f64 - drift
                })
                .fold(0.0f64, |a, v| a.max(v.abs()));
            let corrected_peak = corrected
                .samples
                .row(lead)
                .iter()
                .fold(0.0f64, |a, &v| a.max((v as f64).abs()));
            let rel = (corrected_peak - clean_peak).abs() / clean_peak;
            assert!(rel < 0.05, "lead {lead}: peak drifted by {rel:.3}");
        }
    }

    #[test]
    fn tabular_tokenization_injects_phenotypes_when_asked() {
        let schema = crate::synthetic::tabular_schema();
        let cohort = crate::synthetic::generate_cohort_in_memory(4, 50).unwrap();
        let subject = &cohort.subjects[0];
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let cards: Vec<usize> = schema.categorical.iter().map(|c| c.cardinality).collect();

        let tokenizer = FeatureTokenizer::new(schema.numeric.len(), &cards, 16, &mut rng);
        let (seq, _) = tokenize_tabular(
            subject.tabular.as_ref().unwrap(),
            Some(&subject.phenotypes),
            &schema,
            &tokenizer,
        )
        .unwrap();
        assert_eq!(seq.num_tokens(), schema.numeric.len() + schema.categorical.len());

        let stats = vec![(1.0, 2.0); PHENOTYPE_COUNT];
        let injected_schema = schema.with_injected_phenotypes(&stats).unwrap();
        let tokenizer =
            FeatureTokenizer::new(injected_schema.numeric.len(), &cards, 16, &mut rng);
        let (seq, _) = tokenize_tabular(
            subject.tabular.as_ref().unwrap(),
            Some(&subject.phenotypes),
            &injected_schema,
            &tokenizer,
        )
        .unwrap();
        assert_eq!(
            seq.num_tokens(),
            schema.numeric.len() + PHENOTYPE_COUNT + schema.categorical.len()
        );
    }

    #[test]
    fn tokenize_is_injective_with_random_tables() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let tokenizer = FeatureTokenizer::new(2, &[3, 4], 8, &mut rng);
        let records: Vec<(Vec<f64>, Vec<usize>)> = (0..40)
            .map(|_| {
                (
                    vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                    vec![rng.gen_range(0..3), rng.gen_range(0..4)],
                )
            })
            .collect();
        for i in 0..records.len() {
            for j in i + 1..records.len() {
                if records[i] == records[j] {
                    continue;
                }
                let (a, _) = tokenizer.forward(&records[i].0, &records[i].1).unwrap();
                let (b, _) = tokenizer.forward(&records[j].0, &records[j].1).unwrap();
                assert_ne!(a, b, "distinct records {i},{j} collided");
            }
        }
    }
}
