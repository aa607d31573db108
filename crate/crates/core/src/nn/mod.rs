//! Minimal dense layers with explicit forward caches and backward passes.
//!
//! Activations are `rows × features` matrices (one row per token). Every
//! layer accumulates parameter gradients into [`Param::grad`]; callers zero
//! them between steps.

mod attention;
mod block;
mod layer_norm;
mod linear;
mod mlp;

pub use attention::{Attention, AttentionCache};
pub use block::{Block, BlockCache};
pub use layer_norm::{standardize_rows, LayerNorm, LayerNormCache, LN_EPS};
pub use linear::Linear;
pub use mlp::{gelu, gelu_grad, Mlp, MlpCache};

use ndarray::Array2;
use rand_distr::{Distribution, Normal, Uniform};

use crate::rng::Rng;

/// A trainable matrix with its gradient buffer. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad, decay }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Self::new(Array2::zeros((rows, cols)), decay)
    }

    pub fn filled(rows: usize, cols: usize, v: f64, decay: bool) -> Self {
        Self::new(Array2::from_elem((rows, cols), v), decay)
    }

    /// Glorot-uniform initialised weight, decayed.
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self::new(
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)),
            true,
        )
    }

    /// Gaussian-initialised token vector, not decayed.
    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self::new(
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)),
            false,
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
