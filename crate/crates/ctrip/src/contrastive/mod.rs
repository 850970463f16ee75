//! Localizer-centric contrastive alignment.
//!
//! Uni-modal [CLS] embeddings are projected into a shared 256-dim space
//! and optimized with a bidirectional InfoNCE objective over the `L↔E`
//! and `L↔T` pairs only. There is deliberately no `E↔T` term, so gradient
//! flow between the ECG and tabular towers exists only through the
//! localizer anchor.

pub(crate) mod train;

pub use train::{
    align_stage2, embed_batch, load_alignment, save_alignment, AlignedEmbedding, AlignmentModel,
    Stage2Hparams, Stage2Point, Stage2Report,
};

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::nn::{log_sum_exp, Linear, Params};
use crate::{Error, Result};

/// Shared projection space width.
pub const PROJ_DIM: usize = 256;

/// Default pair-specific temperature initializations.
pub const TAU_LE_INIT: f64 = 0.1;
pub const TAU_LT_INIT: f64 = 0.25;

/// Temperature clamp range.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Learnable pair-specific temperatures, log-parameterized so they stay
/// strictly positive, and clamped to `[0.01, 1.0]` after every update.
#[derive(Debug, Clone)]
pub struct TemperaturePair {
    pub log_tau_le: Array2<f64>,
    pub log_tau_lt: Array2<f64>,
}

impl TemperaturePair {
    pub fn new(tau_le: f64, tau_lt: f64) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&tau_le) || !(TAU_MIN..=TAU_MAX).contains(&tau_lt) {
            return Err(Error::Config(format!(
                "temperatures must start inside [{TAU_MIN}, {TAU_MAX}], got ({tau_le}, {tau_lt})"
            )));
        }
        Ok(TemperaturePair {
            log_tau_le: Array2::from_elem((1, 1), tau_le.ln()),
            log_tau_lt: Array2::from_elem((1, 1), tau_lt.ln()),
        })
    }

    pub fn tau_le(&self) -> f64 {
        self.log_tau_le[[0, 0]].exp()
    }

    pub fn tau_lt(&self) -> f64 {
        self.log_tau_lt[[0, 0]].exp()
    }

    /// Projects the log-parameters back into the clamp range.
    pub fn clamp(&mut self) {
        let (lo, hi) = (TAU_MIN.ln(), TAU_MAX.ln());
        self.log_tau_le[[0, 0]] = self.log_tau_le[[0, 0]].clamp(lo, hi);
        self.log_tau_lt[[0, 0]] = self.log_tau_lt[[0, 0]].clamp(lo, hi);
    }
}

impl Params for TemperaturePair {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.log_tau_le.as_slice().expect("standard layout"),
            self.log_tau_lt.as_slice().expect("standard layout"),
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.log_tau_le.as_slice_mut().expect("standard layout"),
            self.log_tau_lt.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Linear map into the shared space followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Array2<f64>,
    pre_norm: Array2<f64>,
    norms: Array1<f64>,
}

impl ProjectionHead {
    pub fn new(embed_dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionHead { linear: Linear::new(embed_dim, PROJ_DIM, rng) }
    }

    /// Projects rows of `x` and normalizes each to unit L2 norm.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ProjectionCache) {
        let pre_norm = self.linear.forward(x);
        let mut z = pre_norm.clone();
        let norms = crate::nn::l2_normalize_rows(&mut z);
        (z, ProjectionCache { input: x.clone(), pre_norm, norms })
    }

    /// Backward through normalization and the linear map.
    pub fn backward(
        &self,
        cache: &ProjectionCache,
        d_z: &Array2<f64>,
        g: &mut ProjectionHead,
    ) -> Array2<f64> {
        // d(y/|y|) = (dz - z (z . dz)) / |y|
        let mut d_pre = Array2::zeros(d_z.raw_dim());
        for i in 0..d_z.nrows() {
            let norm = cache.norms[i].max(1e-12);
            let y = cache.pre_norm.row(i);
            let z: Array1<f64> = y.mapv(|v| v / norm);
            let dot: f64 = z.iter().zip(d_z.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..d_z.ncols() {
                d_pre[[i, j]] = (d_z[[i, j]] - z[j] * dot) / norm;
            }
        }
        self.linear.backward(&cache.input, &d_pre, &mut g.linear)
    }
}

impl Params for ProjectionHead {
    fn params(&self) -> Vec<&[f64]> {
        self.linear.params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.linear.params_mut()
    }
}

fn check_rows(z: &Array2<f64>, name: &str) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::Invalid(format!(
            "{name}: batch of {} has no negatives (need N >= 2)",
            z.nrows()
        )));
    }
    for (i, row) in z.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "{name}: row {i} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(())
}

/// Directional InfoNCE without precondition checks: rows of `za` anchor
/// against candidate rows of `zb`, similarity is the plain dot product.
///
/// Kept public so finite-difference probes can evaluate the loss at
/// off-manifold (non-unit-norm) points.
pub fn info_nce_directional_unchecked(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> f64 {
    let n = za.nrows();
    let scaled = za.dot(&zb.t()) / tau;
    let mut loss = 0.0;
    for i in 0..n {
        loss += log_sum_exp(scaled.row(i)) - scaled[[i, i]];
    }
    loss / n as f64
}

/// `-1/N Σ_i log( exp(s_ii/τ) / Σ_j exp(s_ij/τ) )` with cosine similarity
/// (dot product on unit rows). Anchors are rows of `za`.
pub fn info_nce_directional(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> Result<f64> {
    if za.dim() != zb.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            za.dim(),
            zb.dim()
        )));
    }
    check_rows(za, "anchors")?;
    check_rows(zb, "candidates")?;
    Ok(info_nce_directional_unchecked(za, zb, tau))
}

/// Gradients of [`info_nce_directional_unchecked`] w.r.t. both batches
/// and the temperature, accumulated into the given buffers.
fn info_nce_grads_into(
    za: &Array2<f64>,
    zb: &Array2<f64>,
    tau: f64,
    weight: f64,
    d_za: &mut Array2<f64>,
    d_zb: &mut Array2<f64>,
    d_tau: &mut f64,
) -> f64 {
    let n = za.nrows();
    let sims = za.dot(&zb.t());
    let scaled = &sims / tau;
    let mut p = crate::nn::softmax_rows(&scaled);
    let loss = {
        let mut l = 0.0;
        for i in 0..n {
            l += log_sum_exp(scaled.row(i)) - scaled[[i, i]];
        }
        l / n as f64
    };
    // dL/dS = (P - I) / (N τ)
    for i in 0..n {
        p[[i, i]] -= 1.0;
    }
    let d_s = p.mapv(|v| v / (n as f64 * tau));
    d_za.scaled_add(weight, &d_s.dot(zb));
    d_zb.scaled_add(weight, &d_s.t().dot(za));
    // dL/dτ = -(1/τ) Σ_ij dS_ij * S_ij   (chain through S/τ)
    let mut dt = 0.0;
    for i in 0..n {
        for j in 0..n {
            dt -= d_s[[i, j]] * sims[[i, j]] / tau;
        }
    }
    *d_tau += weight * dt;
    loss
}

/// Symmetric bidirectional alignment `½(L_{a→b} + L_{b→a})`.
pub fn bidirectional_loss(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> Result<f64> {
    if za.dim() != zb.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            za.dim(),
            zb.dim()
        )));
    }
    check_rows(za, "za")?;
    check_rows(zb, "zb")?;
    Ok(bidirectional_unchecked(za, zb, tau))
}

pub fn bidirectional_unchecked(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> f64 {
    0.5 * (info_nce_directional_unchecked(za, zb, tau)
        + info_nce_directional_unchecked(zb, za, tau))
}

/// Gradients of the total objective.
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub d_zl: Array2<f64>,
    pub d_ze: Array2<f64>,
    pub d_zt: Array2<f64>,
    pub d_log_tau_le: f64,
    pub d_log_tau_lt: f64,
}

/// `½ (L_{L↔E} + L_{L↔T})`; no `E↔T` term by construction.
pub fn total_loss(
    zl: &Array2<f64>,
    ze: &Array2<f64>,
    zt: &Array2<f64>,
    temps: &TemperaturePair,
) -> Result<f64> {
    if zl.nrows() != ze.nrows() || zl.nrows() != zt.nrows() {
        return Err(Error::Shape(format!(
            "batch misalignment: L={}, E={}, T={}",
            zl.nrows(),
            ze.nrows(),
            zt.nrows()
        )));
    }
    check_rows(zl, "Z_L")?;
    check_rows(ze, "Z_E")?;
    check_rows(zt, "Z_T")?;
    Ok(total_loss_unchecked(zl, ze, zt, temps))
}

pub fn total_loss_unchecked(
    zl: &Array2<f64>,
    ze: &Array2<f64>,
    zt: &Array2<f64>,
    temps: &TemperaturePair,
) -> f64 {
    0.5 * (bidirectional_unchecked(zl, ze, temps.tau_le())
        + bidirectional_unchecked(zl, zt, temps.tau_lt()))
}

/// Bidirectional loss and gradients for a single modality pair.
pub(crate) fn pair_loss_with_grads(
    za: &Array2<f64>,
    zb: &Array2<f64>,
    tau: f64,
) -> (f64, Array2<f64>, Array2<f64>, f64) {
    let mut d_za = Array2::zeros(za.raw_dim());
    let mut d_zb = Array2::zeros(zb.raw_dim());
    let mut d_tau = 0.0;
    let l1 = info_nce_grads_into(za, zb, tau, 0.5, &mut d_za, &mut d_zb, &mut d_tau);
    let l2 = info_nce_grads_into(zb, za, tau, 0.5, &mut d_zb, &mut d_za, &mut d_tau);
    // chain through τ = exp(log τ)
    (0.5 * (l1 + l2), d_za, d_zb, d_tau * tau)
}

/// Total loss value with its two bidirectional components.
#[derive(Debug, Clone, Copy)]
pub struct TotalLossValue {
    pub total: f64,
    pub loss_le: f64,
    pub loss_lt: f64,
}

/// Total loss plus analytic gradients w.r.t. every embedding entry and
/// both log-temperatures.
pub fn total_loss_with_grads(
    zl: &Array2<f64>,
    ze: &Array2<f64>,
    zt: &Array2<f64>,
    temps: &TemperaturePair,
) -> Result<(TotalLossValue, TotalLossGrads)> {
    if zl.nrows() != ze.nrows() || zl.nrows() != zt.nrows() {
        return Err(Error::Shape(format!(
            "batch misalignment: L={}, E={}, T={}",
            zl.nrows(),
            ze.nrows(),
            zt.nrows()
        )));
    }
    if zl.nrows() < 2 {
        return Err(Error::Invalid("need N >= 2 for in-batch negatives".into()));
    }
    let mut d_zl = Array2::zeros(zl.raw_dim());
    let mut d_ze = Array2::zeros(ze.raw_dim());
    let mut d_zt = Array2::zeros(zt.raw_dim());
    let (tau_le, tau_lt) = (temps.tau_le(), temps.tau_lt());
    let mut d_tau_le = 0.0;
    let mut d_tau_lt = 0.0;

    // each directional term carries weight ½ (bidirectional) · ½ (total)
    let w = 0.25;
    let l1 = info_nce_grads_into(zl, ze, tau_le, w, &mut d_zl, &mut d_ze, &mut d_tau_le);
    let l2 = info_nce_grads_into(ze, zl, tau_le, w, &mut d_ze, &mut d_zl, &mut d_tau_le);
    let l3 = info_nce_grads_into(zl, zt, tau_lt, w, &mut d_zl, &mut d_zt, &mut d_tau_lt);
    let l4 = info_nce_grads_into(zt, zl, tau_lt, w, &mut d_zt, &mut d_zl, &mut d_tau_lt);
    let value = TotalLossValue {
        total: w * (l1 + l2 + l3 + l4),
        loss_le: 0.5 * (l1 + l2),
        loss_lt: 0.5 * (l3 + l4),
    };

    Ok((
        value,
        TotalLossGrads {
            d_zl,
            d_ze,
            d_zt,
            // chain rule through τ = exp(log τ)
            d_log_tau_le: d_tau_le * tau_le,
            d_log_tau_lt: d_tau_lt * tau_lt,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn random_unit(n: usize, d: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
        let mut z = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        crate::nn::l2_normalize_rows(&mut z);
        z
    }

    /// O(N²) scalar-loop reference implementation.
    fn naive_info_nce(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> f64 {
        let n = za.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                let mut sim = 0.0;
                for k in 0..za.ncols() {
                    sim += za[[i, k]] * zb[[j, k]];
                }
                denom += (sim / tau).exp();
            }
            let mut pos = 0.0;
            for k in 0..za.ncols() {
                pos += za[[i, k]] * zb[[i, k]];
            }
            total -= ((pos / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn matches_naive_double_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for &n in &[2usize, 8, 64] {
            for _ in 0..20 {
                let za = random_unit(n, 16, &mut rng);
                let zb = random_unit(n, 16, &mut rng);
                let tau = rng.gen_range(0.05..0.5);
                let fast = info_nce_directional(&za, &zb, tau).unwrap();
                let slow = naive_info_nce(&za, &zb, tau);
                assert_relative_eq!(fast, slow, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn analytic_anchors() {
        // all rows identical -> uniform softmax -> exactly ln N
        let mut z = Array2::zeros((256, 8));
        for mut row in z.rows_mut() {
            row[3] = 1.0;
        }
        let loss = info_nce_directional(&z, &z, 0.07).unwrap();
        assert_relative_eq!(loss, 256f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(loss, 5.5452, epsilon = 1e-4);

        // N=2 matched pairs, orthogonal cross pairs, τ=0.1:
        // ln(1 + e^{-10})
        let mut za = Array2::zeros((2, 4));
        za[[0, 0]] = 1.0;
        za[[1, 1]] = 1.0;
        let loss = info_nce_directional(&za, &za, 0.1).unwrap();
        assert_relative_eq!(loss, (1.0 + (-10.0f64).exp()).ln(), epsilon = 1e-9);
        assert_relative_eq!(loss, 4.54e-5, epsilon = 1e-7);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let z1 = random_unit(1, 8, &mut rng);
        assert!(info_nce_directional(&z1, &z1, 0.1).is_err(), "no negatives at N=1");

        let mut z = random_unit(4, 8, &mut rng);
        z[[2, 0]] += 0.1;
        let ok = random_unit(4, 8, &mut rng);
        assert!(info_nce_directional(&z, &ok, 0.1).is_err(), "non-unit rows rejected");

        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let z3 = random_unit(3, 8, &mut rng);
        let z4 = random_unit(4, 8, &mut rng);
        assert!(total_loss(&z4, &z3, &z4, &temps).is_err(), "length mismatch");
    }

    #[test]
    fn bidirectional_is_symmetric_and_composes() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let za = random_unit(16, 32, &mut rng);
        let zb = random_unit(16, 32, &mut rng);
        let ab = bidirectional_loss(&za, &zb, 0.13).unwrap();
        let ba = bidirectional_loss(&zb, &za, 0.13).unwrap();
        assert_relative_eq!(ab, ba, epsilon = 1e-7);

        let zt = random_unit(16, 32, &mut rng);
        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let total = total_loss(&za, &zb, &zt, &temps).unwrap();
        let manual = 0.5
            * (bidirectional_loss(&za, &zb, temps.tau_le()).unwrap()
                + bidirectional_loss(&za, &zt, temps.tau_lt()).unwrap());
        assert_relative_eq!(total, manual, epsilon = 1e-7);

        // every row identical across all three matrices -> all similarities
        // equal -> uniform softmax -> exactly ln N
        let mut same = Array2::zeros((16, 32));
        for mut row in same.rows_mut() {
            row[5] = 1.0;
        }
        let total = total_loss(&same, &same, &same, &temps).unwrap();
        assert_relative_eq!(total, 16f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn shuffled_positives_increase_loss() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut wins = 0;
        for _ in 0..100 {
            let za = random_unit(12, 16, &mut rng);
            // matched pairs: zb close to za (small perturbation, renormalized)
            let mut zb = za.clone();
            zb.mapv_inplace(|v| v + 0.05);
            crate::nn::l2_normalize_rows(&mut zb);
            let aligned = naive_info_nce(&za, &zb, 0.1);

            // shuffle rows of zb: positives misaligned
            let mut shuffled = zb.clone();
            for i in (1..12usize).rev() {
                let j = rng.gen_range(0..=i);
                if i != j {
                    let tmp = shuffled.row(i).to_owned();
                    let rj = shuffled.row(j).to_owned();
                    shuffled.row_mut(i).assign(&rj);
                    shuffled.row_mut(j).assign(&tmp);
                }
            }
            let misaligned = naive_info_nce(&za, &shuffled, 0.1);
            if misaligned > aligned {
                wins += 1;
            }
        }
        assert_eq!(wins, 100, "aligned positives must always beat shuffled ones");
    }

    #[test]
    fn permutation_equivariance_of_total_loss() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let zl = random_unit(10, 16, &mut rng);
        let ze = random_unit(10, 16, &mut rng);
        let zt = random_unit(10, 16, &mut rng);
        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let base = total_loss(&zl, &ze, &zt, &temps).unwrap();

        let perm: Vec<usize> = vec![7, 2, 9, 0, 4, 1, 8, 3, 6, 5];
        let apply = |z: &Array2<f64>| {
            let mut out = Array2::zeros(z.raw_dim());
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(i).assign(&z.row(p));
            }
            out
        };
        let permuted =
            total_loss(&apply(&zl), &apply(&ze), &apply(&zt), &temps).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-7);
    }

    #[test]
    fn directional_loss_nonnegative_when_positive_is_row_max() {
        // constructed so s_ii is the maximum of its row: softmax mass on the
        // positive never exceeds 1, so each row term is >= 0
        let mut za: Array2<f64> = Array2::zeros((4, 4));
        for i in 0..4 {
            za[[i, i]] = 1.0;
        }
        let loss = info_nce_directional(&za, &za, 0.2).unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let n = 4;
        let d = 6;
        let zl = random_unit(n, d, &mut rng);
        let ze = random_unit(n, d, &mut rng);
        let zt = random_unit(n, d, &mut rng);
        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let (_, grads) = total_loss_with_grads(&zl, &ze, &zt, &temps).unwrap();
        let eps = 1e-6;
        let check_matrix = |which: usize, analytic: &Array2<f64>| {
            for i in 0..n {
                for j in 0..d {
                    let perturb = |delta: f64| {
                        let mut l = zl.clone();
                        let mut e = ze.clone();
                        let mut t = zt.clone();
                        match which {
                            0 => l[[i, j]] += delta,
                            1 => e[[i, j]] += delta,
                            _ => t[[i, j]] += delta,
                        }
                        total_loss_unchecked(&l, &e, &t, &temps)
                    };
                    let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                    let a = analytic[[i, j]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "matrix {which} [{i},{j}]: {a} vs {fd}");
                }
            }
        };
        check_matrix(0, &grads.d_zl);
        check_matrix(1, &grads.d_ze);
        check_matrix(2, &grads.d_zt);

        // log-temperature gradients
        fn target(t: &mut TemperaturePair, pair: usize) -> &mut Array2<f64> {
            if pair == 0 {
                &mut t.log_tau_le
            } else {
                &mut t.log_tau_lt
            }
        }
        for pair in 0..2 {
            let fd = {
                let mut up = temps.clone();
                let mut down = temps.clone();
                target(&mut up, pair)[[0, 0]] += eps;
                target(&mut down, pair)[[0, 0]] -= eps;
                (total_loss_unchecked(&zl, &ze, &zt, &up)
                    - total_loss_unchecked(&zl, &ze, &zt, &down))
                    / (2.0 * eps)
            };
            let a = if pair == 0 { grads.d_log_tau_le } else { grads.d_log_tau_lt };
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "log tau {pair}: {a} vs {fd}");
        }
    }

    #[test]
    fn no_coupling_between_e_and_t() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 8;
        let zl = random_unit(n, 16, &mut rng);
        let ze = random_unit(n, 16, &mut rng);
        let zt = random_unit(n, 16, &mut rng);
        let temps = TemperaturePair::new(0.1, 0.25).unwrap();
        let (_, g1) = total_loss_with_grads(&zl, &ze, &zt, &temps).unwrap();

        // replacing Z_E by any other unit matrix leaves dZ_T bitwise equal
        let other_ze = random_unit(n, 16, &mut rng);
        let (_, g2) = total_loss_with_grads(&zl, &other_ze, &zt, &temps).unwrap();
        assert_eq!(g1.d_zt, g2.d_zt);

        // and symmetric: replacing Z_T leaves dZ_E bitwise equal
        let other_zt = random_unit(n, 16, &mut rng);
        let (_, g3) = total_loss_with_grads(&zl, &ze, &other_zt, &temps).unwrap();
        assert_eq!(g1.d_ze, g3.d_ze);
    }

    #[test]
    fn temperature_pair_clamps() {
        assert!(TemperaturePair::new(0.001, 0.25).is_err());
        let mut temps = TemperaturePair::new(0.1, 0.25).unwrap();
        temps.log_tau_le[[0, 0]] = -10.0;
        temps.log_tau_lt[[0, 0]] = 3.0;
        temps.clamp();
        assert_relative_eq!(temps.tau_le(), TAU_MIN, epsilon = 1e-12);
        assert_relative_eq!(temps.tau_lt(), TAU_MAX, epsilon = 1e-12);
    }

    #[test]
    fn projection_head_unit_norm_and_gradient() {
        use crate::nn::{finite_difference_grad, max_relative_error};
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut head = ProjectionHead::new(12, &mut rng);
        let x = Array2::from_shape_fn((5, 12), |_| rng.gen_range(-1.0..1.0));
        let (z, cache) = head.forward(&x);
        for row in z.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }

        let w = Array2::from_shape_fn((5, PROJ_DIM), |_| rng.gen_range(-1.0..1.0));
        let mut g = head.clone();
        g.zero();
        head.backward(&cache, &w, &mut g);
        let fd = finite_difference_grad(&mut head, 1e-6, |h| (h.forward(&x).0 * &w).sum());
        assert!(max_relative_error(&g.flat(), &fd) < 1e-4);
    }
}
