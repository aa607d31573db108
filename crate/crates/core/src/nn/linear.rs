use ndarray::{Array2, ArrayView2, Axis};

use super::{join, Module, Param};
use crate::rng::Rng;

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::xavier(input, output, rng),
            bias: Param::zeros(1, output, false),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
        self.backward_params(x, grad_out);
        grad_out.dot(&self.weight.value.t())
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&mut self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) {
        self.weight.grad += &x.t().dot(&grad_out);
        self.bias.grad += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl Module for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
