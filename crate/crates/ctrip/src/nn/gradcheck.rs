use super::Params;

/// Central-difference gradient of `loss` with respect to every parameter
/// of `model`, flattened in [`Params`] order.
///
/// Exposed (not test-gated) because the integration suite validates every
/// analytic backward pass against it.
pub fn finite_difference_grad<M, F>(model: &mut M, eps: f64, mut loss: F) -> Vec<f64>
where
    M: Params,
    F: FnMut(&M) -> f64,
{
    let flat = model.flat();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += eps;
        model.set_flat(&plus).expect("same length");
        let up = loss(model);
        plus[i] = flat[i] - eps;
        model.set_flat(&plus).expect("same length");
        let down = loss(model);
        grad[i] = (up - down) / (2.0 * eps);
    }
    model.set_flat(&flat).expect("same length");
    grad
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-6)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
