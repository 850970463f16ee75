use ndarray::Array2;
use rand::Rng;

use super::{gelu, gelu_grad, AttnCache, Linear, MultiHeadAttention, Params};
use super::{LayerNorm, LayerNormCache};

/// Two-layer feed-forward with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp { fc1: Linear::new(dim, hidden, rng), fc2: Linear::new(hidden, dim, rng) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, g: &mut Mlp) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act, dy, &mut g.fc2);
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(&cache.x, &dpre, &mut g.fc1)
    }
}

impl Params for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    pub attn: AttnCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl TransformerBlock {
    pub fn new(dim: usize, num_heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, num_heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1_cache) = self.ln1.forward(x);
        let (a, attn_cache) = self.attn.forward(&n1);
        let mid = x + &a;
        let (n2, ln2_cache) = self.ln2.forward(&mid);
        let (m, mlp_cache) = self.mlp.forward(&n2);
        let y = mid + m;
        (y, BlockCache { ln1: ln1_cache, attn: attn_cache, ln2: ln2_cache, mlp: mlp_cache })
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &Array2<f64>,
        g: &mut TransformerBlock,
    ) -> Array2<f64> {
        let dn2 = self.mlp.backward(&cache.mlp, dy, &mut g.mlp);
        let dmid = dy + &self.ln2.backward(&cache.ln2, &dn2, &mut g.ln2);
        let dn1 = self.attn.backward(&cache.attn, &dmid, &mut g.attn);
        &dmid + &self.ln1.backward(&cache.ln1, &dn1, &mut g.ln1)
    }
}

impl Params for TransformerBlock {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.mlp.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.mlp.params_mut());
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
    fn block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut block = TransformerBlock::new(8, 2, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));

        let mut g = block.clone();
        g.zero();
        let (_, cache) = block.forward(&x);
        let dx = block.backward(&cache, &w, &mut g);

        let fd = finite_difference_grad(&mut block, 1e-5, |m| (m.forward(&x).0 * &w).sum());
        assert!(max_relative_error(&g.flat(), &fd) < 1e-4);

        let eps = 1e-6;
        let mut x2 = x.clone();
        x2[[1, 3]] += eps;
        let up = (block.forward(&x2).0 * &w).sum();
        x2[[1, 3]] -= 2.0 * eps;
        let down = (block.forward(&x2).0 * &w).sum();
        assert!((dx[[1, 3]] - (up - down) / (2.0 * eps)).abs() < 1e-5);
    }
}
