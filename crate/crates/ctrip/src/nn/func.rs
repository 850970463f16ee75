use ndarray::{Array1, Array2, ArrayView1};
use statrs::function::erf::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)` with the standard normal
/// CDF `Phi` and density `phi`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax (max-subtracted).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Normalizes each row to unit L2 norm; returns the original norms.
///
/// Rows with zero norm are left untouched and report norm 0.
pub fn l2_normalize_rows(x: &mut Array2<f64>) -> Array1<f64> {
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    norms
}
