use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{join, Module, Param};

pub const LN_EPS: f64 = 1e-6;

/// Per-row normalisation followed by a learned scale and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Zero-mean, unit-variance rows; returns the normalised matrix and
/// `1 / sqrt(var + eps)` per row.
fn normalize(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    (out, inv_std)
}

/// Parameter-free per-row standardisation.
pub fn standardize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    normalize(x).0
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Param::filled(1, dim, 1.0, false),
            bias: Param::zeros(1, dim, false),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (normalized, inv_std) = normalize(x);
        let y = &normalized * &self.weight.value + &self.bias.value;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &LayerNormCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let xhat = &cache.normalized;
        self.weight.grad += &(&grad_out * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.bias.grad += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));

        let d = xhat.ncols() as f64;
        let dxhat = &grad_out * &self.weight.value;
        let mut dx = Array2::zeros(dxhat.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = inv / d * (d * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
