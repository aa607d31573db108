use ndarray::{s, Array2, ArrayView2, Axis};

use super::{join, Linear, Module, Param};
use crate::rng::Rng;

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// Softmax weights, one `n × n` matrix per head.
    weights: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    x
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, rng: &mut Rng) -> Self {
        assert!(
            dim.is_multiple_of(num_heads),
            "dim {dim} not divisible by {num_heads} heads"
        );
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            num_heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.input_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let dim = self.dim();
        let head_dim = dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut merged = Array2::zeros((x.nrows(), dim));
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let q = qkv.slice(s![.., cols.clone()]);
            let k = qkv.slice(s![.., dim + cols.start..dim + cols.end]);
            let v = qkv.slice(s![.., 2 * dim + cols.start..2 * dim + cols.end]);
            let a = softmax_rows(q.dot(&k.t()) * scale);
            merged.slice_mut(s![.., cols]).assign(&a.dot(&v));
            weights.push(a);
        }
        let out = self.proj.forward(merged.view());
        (
            out,
            AttentionCache {
                input: x.to_owned(),
                qkv,
                weights,
                merged,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let dim = self.dim();
        let head_dim = dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let d_merged = self.proj.backward(cache.merged.view(), grad_out);
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, a) in cache.weights.iter().enumerate() {
            let cols = h * head_dim..(h + 1) * head_dim;
            let k_cols = dim + cols.start..dim + cols.end;
            let v_cols = 2 * dim + cols.start..2 * dim + cols.end;
            let q = cache.qkv.slice(s![.., cols.clone()]);
            let k = cache.qkv.slice(s![.., k_cols.clone()]);
            let v = cache.qkv.slice(s![.., v_cols.clone()]);
            let d_out = d_merged.slice(s![.., cols.clone()]);

            let d_a = d_out.dot(&v.t());
            d_qkv.slice_mut(s![.., v_cols]).assign(&a.t().dot(&d_out));
            let row_dot = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = a * &(d_a - &row_dot) * scale;
            d_qkv.slice_mut(s![.., cols]).assign(&d_scores.dot(&k));
            d_qkv
                .slice_mut(s![.., k_cols])
                .assign(&d_scores.t().dot(&q));
        }
        self.qkv.backward(cache.input.view(), d_qkv.view())
    }
}

impl Module for Attention {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.qkv.params(&join(prefix, "qkv"), out);
        self.proj.params(&join(prefix, "proj"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.qkv.params_mut(&join(prefix, "qkv"), out);
        self.proj.params_mut(&join(prefix, "proj"), out);
    }
}
