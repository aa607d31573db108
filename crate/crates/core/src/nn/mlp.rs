use ndarray::{Array2, ArrayView2};

use super::{join, Linear, Module, Param};
use crate::rng::Rng;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre_act = self.fc1.forward(x);
        let act = pre_act.mapv(gelu);
        let out = self.fc2.forward(act.view());
        (
            out,
            MlpCache {
                input: x.to_owned(),
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let d_act = self.fc2.backward(cache.act.view(), grad_out);
        let d_pre = d_act * cache.pre_act.mapv(gelu_grad);
        self.fc1.backward(cache.input.view(), d_pre.view())
    }
}

impl Module for Mlp {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.params(&join(prefix, "fc1"), out);
        self.fc2.params(&join(prefix, "fc2"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.params_mut(&join(prefix, "fc1"), out);
        self.fc2.params_mut(&join(prefix, "fc2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.15;
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
