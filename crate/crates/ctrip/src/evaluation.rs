//! Agreement and correlation statistics: mean difference, Bland–Altman
//! limits of agreement, Pearson correlation, percentile-bootstrap CIs, and
//! the fine-tuning-fraction scaling experiment table.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean of `y_pred - y_true`; positive means overestimation.
pub fn mean_difference(y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    check_paired(y_pred, y_true, 2)?;
    let n = y_pred.len() as f64;
    Ok(y_pred.iter().zip(y_true).map(|(p, t)| p - t).sum::<f64>() / n)
}

/// Bland–Altman limits of agreement: `md ± 1.96 * sd` of the differences,
/// with the sample (n-1) standard deviation.
pub fn limits_of_agreement(y_pred: &[f64], y_true: &[f64]) -> Result<(f64, f64)> {
    check_paired(y_pred, y_true, 3)?;
    let md = mean_difference(y_pred, y_true)?;
    let n = y_pred.len() as f64;
    let ss: f64 = y_pred
        .iter()
        .zip(y_true)
        .map(|(p, t)| {
            let d = p - t - md;
            d * d
        })
        .sum();
    let sd = (ss / (n - 1.0)).sqrt();
    Ok((md - 1.96 * sd, md + 1.96 * sd))
}

/// Product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y, 3)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("undefined correlation: zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A paired statistic that can be bootstrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    MeanDifference,
    LoaLow,
    LoaHigh,
    PearsonR,
}

impl Statistic {
    pub fn compute(self, y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
        match self {
            Statistic::MeanDifference => mean_difference(y_pred, y_true),
            Statistic::LoaLow => limits_of_agreement(y_pred, y_true).map(|(lo, _)| lo),
            Statistic::LoaHigh => limits_of_agreement(y_pred, y_true).map(|(_, hi)| hi),
            Statistic::PearsonR => pearson_r(y_pred, y_true),
        }
    }
}

/// 95% percentile bootstrap over paired resamples; deterministic in `seed`.
///
/// Resamples that make the statistic undefined (e.g. zero variance for
/// Pearson R) are redrawn; after 100 consecutive failures the error is
/// propagated.
pub fn bootstrap_ci(
    statistic: Statistic,
    y_pred: &[f64],
    y_true: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_paired(y_pred, y_true, 10)?;
    let n = y_pred.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut rp = vec![0.0; n];
    let mut rt = vec![0.0; n];
    let mut failures = 0;
    while stats.len() < n_resamples {
        for i in 0..n {
            let j = rng.gen_range(0..n);
            rp[i] = y_pred[j];
            rt[i] = y_true[j];
        }
        match statistic.compute(&rp, &rt) {
            Ok(s) => {
                failures = 0;
                stats.push(s);
            }
            Err(e) => {
                failures += 1;
                if failures >= 100 {
                    return Err(e);
                }
            }
        }
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975)))
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_paired(a: &[f64], b: &[f64], min_n: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired vectors differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min_n {
        return Err(Error::Invalid(format!("need at least {min_n} pairs, got {}", a.len())));
    }
    Ok(())
}

/// Point estimate plus bootstrap interval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateWithCi {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Agreement statistics for one phenotype.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhenotypeAgreement {
    pub md: EstimateWithCi,
    pub loa_low: EstimateWithCi,
    pub loa_high: EstimateWithCi,
    pub pearson_r: EstimateWithCi,
    pub n: usize,
}

/// Per-phenotype agreement report keyed by experiment variant.
///
/// `BTreeMap` keeps serialization order (and therefore report bytes)
/// deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct AgreementReport {
    pub variants: BTreeMap<String, BTreeMap<String, PhenotypeAgreement>>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Builds one phenotype's agreement entry with 95% bootstrap CIs.
pub fn phenotype_agreement(y_pred: &[f64], y_true: &[f64], seed: u64) -> Result<PhenotypeAgreement> {
    let md = mean_difference(y_pred, y_true)?;
    let (lo, hi) = limits_of_agreement(y_pred, y_true)?;
    let r = pearson_r(y_pred, y_true)?;
    debug_assert!(lo <= md && md <= hi);
    let ci = |stat: Statistic, salt: u64| {
        bootstrap_ci(stat, y_pred, y_true, BOOTSTRAP_RESAMPLES, seed.wrapping_add(salt))
    };
    let (md_l, md_h) = ci(Statistic::MeanDifference, 0)?;
    let (ll_l, ll_h) = ci(Statistic::LoaLow, 1)?;
    let (lh_l, lh_h) = ci(Statistic::LoaHigh, 2)?;
    let (r_l, r_h) = ci(Statistic::PearsonR, 3)?;
    Ok(PhenotypeAgreement {
        md: EstimateWithCi { value: md, ci_low: md_l, ci_high: md_h },
        loa_low: EstimateWithCi { value: lo, ci_low: ll_l, ci_high: ll_h },
        loa_high: EstimateWithCi { value: hi, ci_low: lh_l, ci_high: lh_h },
        pearson_r: EstimateWithCi { value: r, ci_low: r_l, ci_high: r_h },
        n: y_pred.len(),
    })
}

/// One row of the scaling table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub variant: String,
    pub fraction: f64,
    pub seed: u64,
    pub phenotype: String,
    pub pearson_r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Per-phenotype predictions on the fixed test split: `(name, pred, true)`.
pub type PredictionSet = Vec<(String, Vec<f64>, Vec<f64>)>;

/// Runs every `(variant, fraction, seed)` cell through `run_cell` and
/// collects per-phenotype Pearson R rows with bootstrap CIs.
///
/// `run_cell` is expected to fine-tune the variant at the given fraction
/// and return predictions on the same fixed test split for every cell.
pub fn scaling_experiment<F>(
    variants: &[String],
    fractions: &[f64],
    seeds: &[u64],
    mut run_cell: F,
) -> Result<Vec<ScalingRow>>
where
    F: FnMut(&str, f64, u64) -> Result<PredictionSet>,
{
    let mut rows = Vec::new();
    for variant in variants {
        for &fraction in fractions {
            for &seed in seeds {
                let predictions = run_cell(variant, fraction, seed)?;
                for (phenotype, y_pred, y_true) in &predictions {
                    let r = pearson_r(y_pred, y_true)?;
                    let (ci_low, ci_high) = bootstrap_ci(
                        Statistic::PearsonR,
                        y_pred,
                        y_true,
                        BOOTSTRAP_RESAMPLES,
                        seed ^ 0x5ca1e,
                    )?;
                    rows.push(ScalingRow {
                        variant: variant.clone(),
                        fraction,
                        seed,
                        phenotype: phenotype.clone(),
                        pearson_r: r,
                        ci_low,
                        ci_high,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Writes the scaling table as long-format CSV.
pub fn write_scaling_csv(rows: &[ScalingRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("variant,fraction,seed,phenotype,pearson_r,ci_low,ci_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.fraction, r.seed, r.phenotype, r.pearson_r, r.ci_low, r.ci_high
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Naive single-pass reference implementations used as oracles.
    mod oracle {
        pub fn md(p: &[f64], t: &[f64]) -> f64 {
            let mut s = 0.0;
            for i in 0..p.len() {
                s += p[i] - t[i];
            }
            s / p.len() as f64
        }
        pub fn loa(p: &[f64], t: &[f64]) -> (f64, f64) {
            let m = md(p, t);
            let mut ss = 0.0;
            for i in 0..p.len() {
                let d = p[i] - t[i] - m;
                ss += d * d;
            }
            let sd = (ss / (p.len() as f64 - 1.0)).sqrt();
            (m - 1.96 * sd, m + 1.96 * sd)
        }
        pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
            let n = x.len() as f64;
            let sx: f64 = x.iter().sum();
            let sy: f64 = y.iter().sum();
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let sxx: f64 = x.iter().map(|a| a * a).sum();
            let syy: f64 = y.iter().map(|b| b * b).sum();
            (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
        }
    }

    #[test]
    fn md_examples() {
        assert_eq!(mean_difference(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let t = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(mean_difference(&[1.0, -1.0, 2.0, -2.0], &t).unwrap(), 0.0);
        assert_eq!(mean_difference(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(), 2.0);
        assert!(mean_difference(&[1.0], &[1.0]).is_err());
        assert!(mean_difference(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn loa_hand_computed_example() {
        let t = [0.0, 0.0, 0.0, 0.0];
        let (lo, hi) = limits_of_agreement(&[1.0, -1.0, 2.0, -2.0], &t).unwrap();
        let sd = (10.0f64 / 3.0).sqrt();
        assert_relative_eq!(lo, -1.96 * sd, epsilon = 1e-12);
        assert_relative_eq!(hi, 1.96 * sd, epsilon = 1e-12);
        assert_relative_eq!(hi, 3.5784, epsilon = 1e-3);
    }

    #[test]
    fn loa_degenerate_cases() {
        let t = [0.0; 4];
        let (lo, hi) = limits_of_agreement(&[3.0, 3.0, 3.0, 3.0], &t).unwrap();
        assert_eq!((lo, hi), (3.0, 3.0));
        let (lo, hi) = limits_of_agreement(&t, &t).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        assert!(limits_of_agreement(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_relative_eq!(pearson_r(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson_r(&x, &yn).unwrap(), -1.0, epsilon = 1e-12);

        let y2 = [1.0, 2.0, 3.0, 100.0];
        assert_relative_eq!(
            pearson_r(&x, &y2).unwrap(),
            oracle::pearson(&x, &y2),
            epsilon = 1e-12
        );

        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn statistics_match_naive_oracles_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for n in [3usize, 10, 1000] {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert_relative_eq!(
                mean_difference(&p, &t).unwrap(),
                oracle::md(&p, &t),
                epsilon = 1e-12
            );
            let (lo, hi) = limits_of_agreement(&p, &t).unwrap();
            let (olo, ohi) = oracle::loa(&p, &t);
            assert_relative_eq!(lo, olo, epsilon = 1e-12);
            assert_relative_eq!(hi, ohi, epsilon = 1e-12);
            assert_relative_eq!(
                pearson_r(&p, &t).unwrap(),
                oracle::pearson(&p, &t),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn loa_scale_equivariance_and_pearson_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let p: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = 3.5;
        let pk: Vec<f64> = p.iter().map(|v| k * v).collect();
        let tk: Vec<f64> = t.iter().map(|v| k * v).collect();
        let md = mean_difference(&p, &t).unwrap();
        assert_relative_eq!(mean_difference(&pk, &tk).unwrap(), k * md, epsilon = 1e-12);
        let (lo, hi) = limits_of_agreement(&p, &t).unwrap();
        let (lok, hik) = limits_of_agreement(&pk, &tk).unwrap();
        assert_relative_eq!(lok, k * lo, epsilon = 1e-12);
        assert_relative_eq!(hik, k * hi, epsilon = 1e-12);

        let r = pearson_r(&p, &t).unwrap();
        let pa: Vec<f64> = p.iter().map(|v| -2.0 * v + 7.0).collect();
        let tb: Vec<f64> = t.iter().map(|v| 0.5 * v - 3.0).collect();
        assert_relative_eq!(pearson_r(&pa, &tb).unwrap(), -r, epsilon = 1e-12);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_ci(Statistic::MeanDifference, &v, &v, 200, 7).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        let p: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = bootstrap_ci(Statistic::PearsonR, &p, &t, 500, 9).unwrap();
        let b = bootstrap_ci(Statistic::PearsonR, &p, &t, 500, 9).unwrap();
        assert_eq!(a, b);

        assert!(bootstrap_ci(Statistic::MeanDifference, &v[..5], &v[..5], 10, 0).is_err());
    }

    #[test]
    fn bootstrap_ci_contains_point_estimate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(45);
        for trial in 0..50 {
            let n = rng.gen_range(15..60);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
            let r = pearson_r(&x, &y).unwrap();
            let (lo, hi) = bootstrap_ci(Statistic::PearsonR, &x, &y, 400, trial).unwrap();
            assert!(lo <= r && r <= hi, "trial {trial}: {r} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn scaling_rows_cartesian_product() {
        let variants = vec!["A".to_string(), "B".to_string()];
        let fractions = [0.01, 0.1, 1.0];
        let seeds = [1, 2];
        let rows = scaling_experiment(&variants, &fractions, &seeds, |_, _, seed| {
            let y: Vec<f64> = (0..12).map(|i| i as f64 + seed as f64).collect();
            let p: Vec<f64> = y.iter().map(|v| v * 1.1 + 0.3).collect();
            Ok((0..18).map(|k| (format!("P{k}"), p.clone(), y.clone())).collect())
        })
        .unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2 * 18);
    }
}
