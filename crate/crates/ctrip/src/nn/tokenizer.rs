use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Params;
use crate::{Error, Result};

/// Learned embedding of mixed tabular features into a uniform token space.
///
/// Numeric feature `i` maps to `value * dir[i] + bias[i]`; categorical
/// feature `j` maps to the embedding row of its category. One token per
/// feature, numeric features first, in schema order.
#[derive(Debug, Clone)]
pub struct FeatureTokenizer {
    pub dim: usize,
    pub numeric_dirs: Array2<f64>,
    pub numeric_bias: Array2<f64>,
    pub categorical: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct TokenizerCache {
    numeric: Vec<f64>,
    categories: Vec<usize>,
}

impl FeatureTokenizer {
    pub fn new(
        n_numeric: usize,
        cardinalities: &[usize],
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut sample = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| dist.sample(rng));
        FeatureTokenizer {
            dim,
            numeric_dirs: sample((n_numeric, dim)),
            numeric_bias: sample((n_numeric, dim)),
            categorical: cardinalities.iter().map(|&k| sample((k, dim))).collect(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.numeric_dirs.nrows() + self.categorical.len()
    }

    pub fn forward(
        &self,
        numeric: &[f64],
        categories: &[usize],
    ) -> Result<(Array2<f64>, TokenizerCache)> {
        let n_num = self.numeric_dirs.nrows();
        if numeric.len() != n_num || categories.len() != self.categorical.len() {
            return Err(Error::Shape(format!(
                "tokenizer expects {} numeric / {} categorical features, got {} / {}",
                n_num,
                self.categorical.len(),
                numeric.len(),
                categories.len()
            )));
        }
        let mut tokens = Array2::zeros((self.n_features(), self.dim));
        for (i, &value) in numeric.iter().enumerate() {
            for d in 0..self.dim {
                tokens[[i, d]] = value * self.numeric_dirs[[i, d]] + self.numeric_bias[[i, d]];
            }
        }
        for (j, (&idx, table)) in categories.iter().zip(&self.categorical).enumerate() {
            if idx >= table.nrows() {
                return Err(Error::Invalid(format!(
                    "categorical feature {j}: index {idx} >= cardinality {}",
                    table.nrows()
                )));
            }
            tokens.row_mut(n_num + j).assign(&table.row(idx));
        }
        Ok((tokens, TokenizerCache { numeric: numeric.to_vec(), categories: categories.to_vec() }))
    }

    pub fn backward(
        &self,
        cache: &TokenizerCache,
        d_tokens: &Array2<f64>,
        g: &mut FeatureTokenizer,
    ) {
        let n_num = cache.numeric.len();
        for (i, &value) in cache.numeric.iter().enumerate() {
            for d in 0..self.dim {
                let dt = d_tokens[[i, d]];
                g.numeric_dirs[[i, d]] += value * dt;
                g.numeric_bias[[i, d]] += dt;
            }
        }
        for (j, &idx) in cache.categories.iter().enumerate() {
            let mut row = g.categorical[j].row_mut(idx);
            row += &d_tokens.row(n_num + j);
        }
    }
}

impl Params for FeatureTokenizer {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.numeric_dirs.as_slice().expect("standard layout"),
            self.numeric_bias.as_slice().expect("standard layout"),
        ];
        v.extend(self.categorical.iter().map(|t| t.as_slice().expect("standard layout")));
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.numeric_dirs.as_slice_mut().expect("standard layout"),
            self.numeric_bias.as_slice_mut().expect("standard layout"),
        ];
        v.extend(self.categorical.iter_mut().map(|t| t.as_slice_mut().expect("standard layout")));
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
    fn zero_value_yields_bias_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tok = FeatureTokenizer::new(2, &[3], 4, &mut rng);
        let (tokens, _) = tok.forward(&[0.0, 1.5], &[2]).unwrap();
        for d in 0..4 {
            assert_eq!(tokens[[0, d]], tok.numeric_bias[[0, d]]);
        }
    }

    #[test]
    fn out_of_range_category_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tok = FeatureTokenizer::new(1, &[3], 4, &mut rng);
        assert!(tok.forward(&[0.5], &[3]).is_err());
    }

    #[test]
    fn single_categorical_change_moves_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tok = FeatureTokenizer::new(2, &[4, 3], 6, &mut rng);
        let (a, _) = tok.forward(&[0.2, -1.0], &[1, 0]).unwrap();
        let (b, _) = tok.forward(&[0.2, -1.0], &[3, 0]).unwrap();
        let changed: Vec<usize> = (0..a.nrows())
            .filter(|&i| a.row(i).iter().zip(b.row(i)).any(|(x, y)| x != y))
            .collect();
        assert_eq!(changed, vec![2]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tok = FeatureTokenizer::new(3, &[4, 2], 5, &mut rng);
        let numeric = [0.3, -0.8, 2.0];
        let cats = [1usize, 0];
        let w = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));

        let mut g = tok.clone();
        g.zero();
        let (_, cache) = tok.forward(&numeric, &cats).unwrap();
        tok.backward(&cache, &w, &mut g);

        let fd = finite_difference_grad(&mut tok, 1e-5, |m| {
            (m.forward(&numeric, &cats).unwrap().0 * &w).sum()
        });
        assert!(max_relative_error(&g.flat(), &fd) < 1e-7);
    }
}
