//! ViT encoder shared by the online and momentum branches, and the continuous
//! 2D sin-cos position embedding.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::nn::{join, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Module, Param};
use crate::region::GridCoord;
use crate::rng::Rng;
use crate::{Error, Result};

/// Per-channel RGB statistics used to standardise encoder input (the usual
/// ImageNet values).
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub use_class_token: bool,
}

impl EncoderConfig {
    /// Desk-scale encoder used throughout the tests.
    pub fn tiny() -> Self {
        Self::with_dims(64, 2, 2)
    }

    pub fn vit_s() -> Self {
        Self::with_dims(384, 12, 6)
    }

    pub fn vit_b() -> Self {
        Self::with_dims(768, 12, 12)
    }

    fn with_dims(embed_dim: usize, depth: usize, num_heads: usize) -> Self {
        Self {
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            patch_size: 16,
            channels: 3,
            use_class_token: true,
        }
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return Err(Error::arg("encoder dimensions must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::arg(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::arg(format!(
                "embed_dim {} must be divisible by 4 for the 2D sin-cos embedding",
                self.embed_dim
            )));
        }
        if self.channels != PIXEL_MEAN.len() {
            return Err(Error::arg(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::arg("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Standardises flattened RGB patch vectors (channel fastest) per channel.
pub fn standardize_pixels(tokens: ArrayView2<f64>) -> Array2<f64> {
    let mut out = tokens.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let c = j % PIXEL_MEAN.len();
            *v = (*v - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    out
}

/// Fixed 2D sin-cos embedding of real-valued grid coordinates.
///
/// The first `D/2` channels encode the row and the last `D/2` the column.
/// Inside each half, channels `2k` and `2k+1` hold `sin(c·ω_k)` and
/// `cos(c·ω_k)` with `ω_k = 10000^(-4k/D)`.
pub fn sincos_embed_2d(coords: &[GridCoord], dim: usize) -> Result<Array2<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::arg(format!(
            "embedding dim {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-4.0 * k as f64 / dim as f64))
        .collect();
    let mut out = Array2::zeros((coords.len(), dim));
    for (mut row, &(r, c)) in out.rows_mut().into_iter().zip(coords) {
        for (k, &w) in freqs.iter().enumerate() {
            row[2 * k] = (r * w).sin();
            row[2 * k + 1] = (r * w).cos();
            row[dim / 2 + 2 * k] = (c * w).sin();
            row[dim / 2 + 2 * k + 1] = (c * w).cos();
        }
    }
    Ok(out)
}

/// ViT: patch projection, optional class token, pre-norm blocks, final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Option<Param>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    tokens: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dim = config.embed_dim;
        Ok(Self {
            config,
            patch_embed: Linear::new(config.token_len(), dim, rng),
            cls_token: config
                .use_class_token
                .then(|| Param::normal(1, dim, 0.02, rng)),
            blocks: (0..config.depth)
                .map(|_| Block::new(dim, config.num_heads, config.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(dim),
        })
    }

    pub fn has_class_token(&self) -> bool {
        self.cls_token.is_some()
    }

    /// Number of leading non-patch rows in the output.
    pub fn prefix_len(&self) -> usize {
        usize::from(self.has_class_token())
    }

    /// Linear projection of raw patch vectors, after per-channel
    /// standardisation.
    pub fn patch_embed(&self, tokens: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.patch_embed.forward(self.standardized(tokens)?.view()))
    }

    fn standardized(&self, tokens: ArrayView2<f64>) -> Result<Array2<f64>> {
        if tokens.ncols() != self.patch_embed.input_dim() {
            return Err(Error::arg(format!(
                "token length {} does not match patch projection input {}",
                tokens.ncols(),
                self.patch_embed.input_dim()
            )));
        }
        Ok(standardize_pixels(tokens))
    }

    /// Encodes patch vectors at the given grid coordinates.
    ///
    /// Output has one row per input token, preceded by the class token when
    /// enabled.
    pub fn forward(
        &self,
        tokens: ArrayView2<f64>,
        coords: &[GridCoord],
    ) -> Result<(Array2<f64>, EncoderCache)> {
        if tokens.nrows() == 0 && !self.has_class_token() {
            return Err(Error::arg("encoder needs at least one token"));
        }
        if coords.len() != tokens.nrows() {
            return Err(Error::arg(format!(
                "{} coordinates for {} tokens",
                coords.len(),
                tokens.nrows()
            )));
        }
        let standardized = self.standardized(tokens)?;
        let embedded = self.patch_embed.forward(standardized.view())
            + sincos_embed_2d(coords, self.config.embed_dim)?;
        let x = match &self.cls_token {
            Some(cls) => {
                concatenate(Axis(0), &[cls.value.view(), embedded.view()]).expect("matching widths")
            }
            None => embedded,
        };
        let (out, blocks, norm) = self.run_blocks(x);
        Ok((
            out,
            EncoderCache {
                tokens: standardized,
                blocks,
                norm,
            },
        ))
    }

    /// Sequence-level entry point: `embeddings` already carry their position
    /// terms. Returns the output without caches.
    pub fn forward_embedded(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        let x = match &self.cls_token {
            Some(cls) => {
                concatenate(Axis(0), &[cls.value.view(), embeddings]).expect("matching widths")
            }
            None => embeddings.to_owned(),
        };
        self.run_blocks(x).0
    }

    fn run_blocks(&self, mut x: Array2<f64>) -> (Array2<f64>, Vec<BlockCache>, LayerNormCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x.view());
            caches.push(cache);
            x = y;
        }
        let (out, norm) = self.norm.forward(x.view());
        (out, caches, norm)
    }

    /// Accumulates parameter gradients from `∂L/∂output`.
    pub fn backward(&mut self, cache: &EncoderCache, grad_out: ArrayView2<f64>) {
        let mut grad = self.norm.backward(&cache.norm, grad_out);
        for (block, block_cache) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            grad = block.backward(block_cache, grad.view());
        }
        let prefix = self.prefix_len();
        if let Some(cls) = &mut self.cls_token {
            cls.grad += &grad.slice(s![0..1, ..]);
        }
        // Position embeddings are fixed; only the projection learns.
        self.patch_embed
            .backward_params(cache.tokens.view(), grad.slice(s![prefix.., ..]));
    }

    /// Global image descriptor: class-token output, or the mean of the token
    /// outputs when the encoder has no class token.
    pub fn global_feature(&self, output: &Array2<f64>) -> ndarray::Array1<f64> {
        if self.has_class_token() {
            output.row(0).to_owned()
        } else {
            output.mean_axis(Axis(0)).expect("non-empty output")
        }
    }
}

impl Module for Encoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.patch_embed.params(&join(prefix, "patch_embed"), out);
        if let Some(cls) = &self.cls_token {
            out.push((join(prefix, "cls_token"), cls));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.params(&join(prefix, "norm"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.patch_embed
            .params_mut(&join(prefix, "patch_embed"), out);
        if let Some(cls) = &mut self.cls_token {
            out.push((join(prefix, "cls_token"), cls));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.params_mut(&join(prefix, "norm"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::grid_coords;
    use crate::rng::seeded;
    use ndarray::Array2;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            channels: 3,
            use_class_token: true,
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sincos_origin_and_direct_values() {
        for dim in [4, 8, 64] {
            let e = sincos_embed_2d(&[(0.0, 0.0)], dim).unwrap();
            for (i, v) in e.row(0).iter().enumerate() {
                assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
        let e = sincos_embed_2d(&[(1.0, 0.0)], 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 0.0, 1.0];
        for (a, b) in e.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((expected[0] - 0.8415).abs() < 1e-4 && (expected[1] - 0.5403).abs() < 1e-4);
    }

    #[test]
    fn sincos_rejects_bad_dim() {
        assert!(sincos_embed_2d(&[(0.0, 0.0)], 6).is_err());
        assert!(sincos_embed_2d(&[(0.0, 0.0)], 0).is_err());
    }

    #[test]
    fn sincos_bounded_and_injective_on_person_grid() {
        let mut rng = seeded(1);
        let coords: Vec<GridCoord> = (0..200)
            .map(|_| (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .collect();
        let e = sincos_embed_2d(&coords, 32).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));

        for dim in [16, 64, 768] {
            let grid = grid_coords((16, 8));
            let e = sincos_embed_2d(&grid, dim).unwrap();
            for i in 0..grid.len() {
                for j in i + 1..grid.len() {
                    let diff = (&e.row(i) - &e.row(j)).mapv(f64::abs).sum();
                    assert!(diff > 1e-6, "dim {dim}: {:?} vs {:?}", grid[i], grid[j]);
                }
            }
        }
    }

    #[test]
    fn patch_embed_properties() {
        let mut rng = seeded(3);
        let mut enc = Encoder::new(small_config(), &mut rng).unwrap();
        let mean_patch = Array2::from_shape_fn((5, 12), |(_, j)| PIXEL_MEAN[j % 3]);
        assert!(enc
            .patch_embed(mean_patch.view())
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));

        // Linear in the deviation from the channel means.
        let d = random_matrix(5, 12, &mut rng);
        let lhs = enc.patch_embed((&mean_patch + &(&d * 2.5)).view()).unwrap();
        let rhs = enc.patch_embed((&mean_patch + &d).view()).unwrap() * 2.5;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-12));

        assert!(enc
            .patch_embed(random_matrix(5, 11, &mut rng).view())
            .is_err());

        let square = EncoderConfig {
            embed_dim: 12,
            ..small_config()
        };
        enc = Encoder::new(square, &mut rng).unwrap();
        enc.patch_embed.weight.value = Array2::eye(12);
        let x = random_matrix(3, 12, &mut rng);
        let out = enc.patch_embed(x.view()).unwrap();
        assert_eq!(out, standardize_pixels(x.view()));
        assert_eq!(out[[1, 4]], (x[[1, 4]] - PIXEL_MEAN[1]) / PIXEL_STD[1]);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let mut rng = seeded(4);
        let enc = Encoder::new(small_config(), &mut rng).unwrap();
        let x = random_matrix(7, 12, &mut rng);
        let coords = &grid_coords((4, 2))[..7];
        let (a, _) = enc.forward(x.view(), coords).unwrap();
        let (b, _) = enc.forward(x.view(), coords).unwrap();
        assert_eq!(a.dim(), (8, 16));
        assert_eq!(a, b);
        assert!(enc.forward(x.view(), &coords[..6]).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = seeded(5);
        let enc = Encoder::new(small_config(), &mut rng).unwrap();
        let n = 8;
        let embeddings = random_matrix(n, 16, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = embeddings.select(Axis(0), &perm);
        let out = enc.forward_embedded(embeddings.view());
        let out_perm = enc.forward_embedded(permuted.view());
        // class token row is unaffected
        assert!((&out.row(0) - &out_perm.row(0))
            .iter()
            .all(|v| v.abs() < 1e-12));
        for (i, &p) in perm.iter().enumerate() {
            let diff = &out.row(p + 1) - &out_perm.row(i + 1);
            assert!(diff.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.embed_dim = 18;
        c.num_heads = 2;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::vit_b().validate().is_ok());
        assert!(EncoderConfig::vit_s().validate().is_ok());
        assert!(EncoderConfig::tiny().validate().is_ok());
    }

    /// Central-difference check of ∂(Σ w ⊙ out)/∂θ for every encoder parameter.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = seeded(6);
        let mut enc = Encoder::new(small_config(), &mut rng).unwrap();
        let x = random_matrix(5, 12, &mut rng);
        let coords = &grid_coords((4, 2))[..5];
        let upstream = random_matrix(6, 16, &mut rng);
        let objective = |e: &Encoder| (e.forward(x.view(), coords).unwrap().0 * &upstream).sum();

        enc.zero_grad();
        let (_, cache) = enc.forward(x.view(), coords).unwrap();
        enc.backward(&cache, upstream.view());
        let analytic: Vec<(String, Array2<f64>)> = enc
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();

        let h = 1e-5;
        for (idx, (name, grad)) in analytic.iter().enumerate() {
            for flat in (0..grad.len()).step_by(7.max(grad.len() / 6)) {
                let (r, c) = (flat / grad.ncols(), flat % grad.ncols());
                let mut probe = enc.clone();
                probe.named_params_mut()[idx].1.value[[r, c]] += h;
                let up = objective(&probe);
                probe.named_params_mut()[idx].1.value[[r, c]] -= 2.0 * h;
                let down = objective(&probe);
                let numeric = (up - down) / (2.0 * h);
                let a = grad[[r, c]];
                let tol = 1e-4 * a.abs().max(numeric.abs()) + 1e-8;
                assert!(
                    (a - numeric).abs() <= tol,
                    "{name}[{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}
