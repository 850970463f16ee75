use super::Params;

/// Adam with decoupled weight decay.
///
/// One instance per parameter group; groups with different learning rates
/// or decay settings (e.g. regression head vs pre-trained encoder) each get
/// their own optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of `model` from `grads` at learning rate `lr`.
    ///
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`. Moment buffers
    /// are allocated on the first call and keyed by parameter order, so the
    /// same optimizer must always be fed the same model.
    pub fn step<M: Params>(&mut self, model: &mut M, grads: &M, lr: f64) {
        self.step_slices(&mut model.params_mut(), &grads.params(), lr);
    }

    /// Slice-level update; lets callers step one parameter group of a
    /// larger model (e.g. head vs encoder at different learning rates).
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "optimizer fed a different group");

        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        for (i, (p, gp)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = gp[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }
}

/// Cosine annealing from `lr0` down to `min_lr` over `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, min_lr: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let progress = step.min(total) as f64 / total as f64;
    min_lr + 0.5 * (lr0 - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::new(3, 3, &mut rng);
        let before = lin.flat();
        let mut g = lin.clone();
        for p in g.params_mut() {
            p.fill(1.0);
        }
        let mut opt = AdamW::new(0.01);
        opt.step(&mut lin, &g, 0.0);
        assert_eq!(lin.flat(), before);
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut lin = Linear::new(4, 1, &mut rng);
        let x = Array2::from_shape_fn((16, 4), |_| rng.gen_range(-1.0..1.0));
        let w_true = Array2::from_shape_fn((4, 1), |_| rng.gen_range(-1.0..1.0));
        let target = x.dot(&w_true);
        let loss_of = |m: &Linear| (m.forward(&x) - &target).mapv(|v| v * v).sum() / 16.0;

        let mut opt = AdamW::new(0.0);
        let initial = loss_of(&lin);
        for _ in 0..200 {
            let mut g = lin.clone();
            g.zero();
            let y = lin.forward(&x);
            let dy = (y - &target).mapv(|v| 2.0 * v / 16.0);
            lin.backward(&x, &dy, &mut g);
            opt.step(&mut lin, &g, 1e-2);
        }
        assert!(loss_of(&lin) < 0.1 * initial);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert!((cosine_lr(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-12);
        assert!(cosine_lr(120, 100, 1.0, 0.1) >= 0.1);
    }
}
