use ndarray::{Array2, ArrayView2};

use super::{
    join, Attention, AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache, Module, Param,
};
use crate::rng::Rng;

/// Pre-norm transformer block:
/// `x + attn(norm1(x))`, then `+ mlp(norm2(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new(dim: usize, num_heads: usize, mlp_ratio: f64, rng: &mut Rng) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, num_heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
        let (h, norm1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(h.view());
        let x1 = &x + &a;
        let (h2, norm2) = self.norm2.forward(x1.view());
        let (m, mlp) = self.mlp.forward(h2.view());
        (
            x1 + m,
            BlockCache {
                norm1,
                attn,
                norm2,
                mlp,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let d_h2 = self.mlp.backward(&cache.mlp, grad_out);
        let d_x1 = &grad_out + &self.norm2.backward(&cache.norm2, d_h2.view());
        let d_h = self.attn.backward(&cache.attn, d_x1.view());
        &d_x1 + &self.norm1.backward(&cache.norm1, d_h.view())
    }
}

impl Module for Block {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.params(&join(prefix, "norm1"), out);
        self.attn.params(&join(prefix, "attn"), out);
        self.norm2.params(&join(prefix, "norm2"), out);
        self.mlp.params(&join(prefix, "mlp"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.norm1.params_mut(&join(prefix, "norm1"), out);
        self.attn.params_mut(&join(prefix, "attn"), out);
        self.norm2.params_mut(&join(prefix, "norm2"), out);
        self.mlp.params_mut(&join(prefix, "mlp"), out);
    }
}
