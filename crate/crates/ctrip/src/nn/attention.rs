use ndarray::{s, Array2};
use rand::Rng;

use super::{softmax_rows, Linear, Params};

/// Standard multi-head self-attention over a `[tokens, dim]` sequence.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

/// Forward intermediates; `probs[h]` holds the post-softmax attention
/// weights of head `h`, rows indexed by query token.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % num_heads == 0, "dim must be divisible by num_heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            num_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let (tokens, dim) = x.dim();
        let dh = dim / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut concat = Array2::zeros((tokens, dim));
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let p = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let y = self.wo.forward(&concat);
        (y, AttnCache { x: x.clone(), q, k, v, concat, probs })
    }

    pub fn backward(
        &self,
        cache: &AttnCache,
        dy: &Array2<f64>,
        g: &mut MultiHeadAttention,
    ) -> Array2<f64> {
        let (tokens, dim) = cache.x.dim();
        let dh = dim / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dconcat = self.wo.backward(&cache.concat, dy, &mut g.wo);

        let mut dq = Array2::zeros((tokens, dim));
        let mut dk = Array2::zeros((tokens, dim));
        let mut dv = Array2::zeros((tokens, dim));
        for h in 0..self.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let p = &cache.probs[h];
            let doh = dconcat.slice(cols);

            let dp = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));

            // softmax backward: ds = p .* (dp - rowsum(dp .* p))
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in ds_row.iter_mut().zip(p_row.iter()) {
                    *d = pv * (*d - dot);
                }
            }
            ds.mapv_inplace(|v| v * scale);

            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        let mut dx = self.wq.backward(&cache.x, &dq, &mut g.wq);
        dx += &self.wk.backward(&cache.x, &dk, &mut g.wk);
        dx += &self.wv.backward(&cache.x, &dv, &mut g.wv);
        dx
    }
}

impl Params for MultiHeadAttention {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.wq.params();
        v.extend(self.wk.params());
        v.extend(self.wv.params());
        v.extend(self.wo.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.wq.params_mut();
        v.extend(self.wk.params_mut());
        v.extend(self.wv.params_mut());
        v.extend(self.wo.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = MultiHeadAttention::new(8, 2, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = attn.forward(&x);
        assert_eq!(y.dim(), (5, 8));
        for p in &cache.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut attn = MultiHeadAttention::new(8, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));

        let mut g = attn.clone();
        g.zero();
        let (_, cache) = attn.forward(&x);
        let dx = attn.backward(&cache, &w, &mut g);

        let fd = finite_difference_grad(&mut attn, 1e-5, |m| (m.forward(&x).0 * &w).sum());
        assert!(max_relative_error(&g.flat(), &fd) < 1e-4);

        let eps = 1e-6;
        for idx in [(0usize, 0usize), (2, 5), (3, 7)] {
            let mut x2 = x.clone();
            x2[idx] += eps;
            let up = (attn.forward(&x2).0 * &w).sum();
            x2[idx] -= 2.0 * eps;
            let down = (attn.forward(&x2).0 * &w).sum();
            assert!((dx[idx] - (up - down) / (2.0 * eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = MultiHeadAttention::new(8, 2, &mut rng);
        let x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = attn.forward(&x);

        let perm = [3usize, 1, 5, 0, 4, 2];
        let mut xp = Array2::zeros((6, 8));
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(p));
        }
        let (yp, _) = attn.forward(&xp);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp[[i, j]] - y[[p, j]]).abs() < 1e-12);
            }
        }
    }
}
