use ndarray::{Array1, Array2, Axis};

use super::Params;

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Array1::ones(dim), beta: Array1::zeros(dim), eps: 1e-6 }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        g: &mut LayerNorm,
    ) -> Array2<f64> {
        let n = dy.ncols() as f64;
        g.gamma.scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        g.beta.scaled_add(1.0, &dy.sum_axis(Axis(0)));

        let dxhat = dy * &self.gamma;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / n;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;

        let mut dx = dxhat;
        for ((mut row, xhat_row), ((&m1, &m2), &inv)) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter().zip(mean_dxhat_xhat.iter()).zip(cache.inv_std.iter()))
        {
            for (d, &xh) in row.iter_mut().zip(xhat_row.iter()) {
                *d = inv * (*d - m1 - xh * m2);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.gamma.as_slice().expect("standard layout"),
            self.beta.as_slice().expect("standard layout"),
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.gamma.as_slice_mut().expect("standard layout"),
            self.beta.as_slice_mut().expect("standard layout"),
        ]
    }
}
