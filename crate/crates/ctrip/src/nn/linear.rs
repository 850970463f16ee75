use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Params;

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| dist.sample(rng));
        Linear { w, b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `x: [n, in] -> [n, out]`. The caller keeps `x` as the backward cache.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight gradients into `g` and returns `dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w.scaled_add(1.0, &x.t().dot(dy));
        g.b.scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_grad, max_relative_error};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_shape_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(2, 3, &mut rng);
        lin.w.fill(0.0);
        lin.b = array![1.0, 2.0, 3.0];
        let y = lin.forward(&array![[5.0, 5.0]]);
        assert_eq!(y, array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));

        // loss = sum(y^2)
        let mut g = lin.clone();
        g.zero();
        let y = lin.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(&x, &dy, &mut g);

        let fd = finite_difference_grad(&mut lin, 1e-5, |m| {
            m.forward(&x).iter().map(|v| v * v).sum()
        });
        assert!(max_relative_error(&g.flat(), &fd) < 1e-7);

        // input gradient via FD on one entry
        let mut x2 = x.clone();
        let eps = 1e-6;
        x2[[0, 0]] += eps;
        let up: f64 = lin.forward(&x2).iter().map(|v| v * v).sum();
        x2[[0, 0]] -= 2.0 * eps;
        let down: f64 = lin.forward(&x2).iter().map(|v| v * v).sum();
        let fd_dx = (up - down) / (2.0 * eps);
        assert!((dx[[0, 0]] - fd_dx).abs() < 1e-6);
    }
}
