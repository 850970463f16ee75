//! Minimal neural-network substrate: `f64` tensors via `ndarray`, explicit
//! forward caches and hand-written backward passes.
//!
//! Design rules shared by every layer:
//! - parameters live in plain structs; a gradient store is a zeroed clone
//!   of the same struct, so [`Params`] walks both in the same stable order;
//! - `forward` borrows `&self` and returns an explicit cache, which makes
//!   data-parallel training a matter of running samples on threads and
//!   merging gradient stores in a fixed order (bit-reproducible regardless
//!   of thread count);
//! - everything is `f64` so analytic gradients can be checked against
//!   central finite differences at tight tolerances.

mod attention;
mod block;
mod func;
mod gradcheck;
mod linear;
mod norm;
mod optim;
mod tokenizer;

pub use attention::{AttnCache, MultiHeadAttention};
pub use block::{BlockCache, Mlp, MlpCache, TransformerBlock};
pub use func::{gelu, gelu_grad, l2_normalize_rows, log_sum_exp, softmax_rows};
pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use optim::{cosine_lr, AdamW};
pub use tokenizer::{FeatureTokenizer, TokenizerCache};

use ndarray::Array2;

/// Walks a model's parameter tensors as flat slices in a stable order.
///
/// The only contract is that `params` and `params_mut` enumerate the same
/// tensors in the same order for structurally identical values, which lets
/// a zeroed clone of a model serve as its gradient store.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Zero every parameter; turns a clone into a gradient store.
    fn zero(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let mut mine = self.params_mut();
        let theirs = other.params();
        assert_eq!(mine.len(), theirs.len(), "parameter tree mismatch");
        for (m, t) in mine.iter_mut().zip(theirs) {
            assert_eq!(m.len(), t.len(), "parameter tensor mismatch");
            for (a, b) in m.iter_mut().zip(t.iter()) {
                *a += scale * b;
            }
        }
    }

    fn has_non_finite(&self) -> bool {
        self.params().iter().any(|p| p.iter().any(|x| !x.is_finite()))
    }

    /// Concatenation of all tensors; used by checkpointing and grad checks.
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in self.params() {
            out.extend_from_slice(p);
        }
        out
    }

    /// Inverse of [`Params::flat`]. Errors if the total length differs.
    fn set_flat(&mut self, values: &[f64]) -> crate::Result<()> {
        if values.len() != self.n_params() {
            return Err(crate::Error::Shape(format!(
                "flat parameter vector has {} values, model expects {}",
                values.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&values[offset..offset + p.len()]);
            offset += p.len();
        }
        Ok(())
    }
}

impl<T: Params> Params for Vec<T> {
    fn params(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|t| t.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|t| t.params_mut()).collect()
    }
}

/// Fixed sinusoidal positional encoding table `[num_positions, dim]`.
///
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(...)`. Not a
/// parameter: encoders index into it by each token's original position.
pub fn sinusoidal_positions(num_positions: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((num_positions, dim));
    for p in 0..num_positions {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            pe[[p, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
