//! The full pre-training objective: masked RegionA encoding, pixel and
//! feature decoders predicting RegionB, the EMA target encoder and losses.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::backbone::{sincos_embed_2d, Encoder, EncoderCache, EncoderConfig};
use crate::data::ImageRecord;
use crate::mask::{generate_mask, split_visible, MaskLayout, MaskStrategy};
use crate::nn::{
    join, standardize_rows, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache,
    Module, Param,
};
use crate::region::{
    grid_coords, patchify, relation_coords, sample_cross_region, GridCoord, RegionPair,
    TokenSequence,
};
use crate::rng::{seeded, Rng};
use crate::{Error, Result};

/// Number of transformer blocks in each decoder.
pub const DECODER_DEPTH: usize = 2;
/// Guard added to the per-patch standard deviation of pixel targets.
pub const TARGET_EPS: f64 = 1e-6;
pub const GAMMA_START: f64 = 0.999;
pub const GAMMA_END: f64 = 0.9999;
pub const GAMMA_WARM_EPOCHS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub output_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Region (and training image) size `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub encoder: EncoderConfig,
    pub decoder_embed_dim: usize,
    pub decoder_num_heads: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            image_size: (256, 128),
            encoder: EncoderConfig::tiny(),
            decoder_embed_dim: 64,
            decoder_num_heads: 2,
        }
    }

    pub fn vit_s() -> Self {
        Self {
            image_size: (256, 128),
            encoder: EncoderConfig::vit_s(),
            decoder_embed_dim: 384,
            decoder_num_heads: 6,
        }
    }

    pub fn vit_b() -> Self {
        Self {
            image_size: (256, 128),
            encoder: EncoderConfig::vit_b(),
            decoder_embed_dim: 512,
            decoder_num_heads: 16,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "vit-s" => Ok(Self::vit_s()),
            "vit-b" => Ok(Self::vit_b()),
            other => Err(Error::arg(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let t = self.encoder.patch_size;
        (self.image_size.0 / t, self.image_size.1 / t)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn pixel_decoder(&self) -> DecoderConfig {
        self.decoder(self.encoder.token_len())
    }

    pub fn feature_decoder(&self) -> DecoderConfig {
        self.decoder(self.encoder.embed_dim)
    }

    fn decoder(&self, output_dim: usize) -> DecoderConfig {
        DecoderConfig {
            embed_dim: self.decoder_embed_dim,
            depth: DECODER_DEPTH,
            num_heads: self.decoder_num_heads,
            mlp_ratio: self.encoder.mlp_ratio,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let t = self.encoder.patch_size;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % t != 0 || w % t != 0 {
            return Err(Error::arg(format!(
                "image size {h}x{w} is not a positive multiple of patch size {t}"
            )));
        }
        let d = self.decoder_embed_dim;
        if d == 0
            || !d.is_multiple_of(4)
            || self.decoder_num_heads == 0
            || !d.is_multiple_of(self.decoder_num_heads)
        {
            return Err(Error::arg(format!(
                "decoder_embed_dim {d} must be a multiple of 4 and of decoder_num_heads {}",
                self.decoder_num_heads
            )));
        }
        Ok(())
    }
}

/// Knobs of the objective that do not change parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainHyper {
    pub mask_ratio: f64,
    pub max_shift: i64,
    pub lambda: f64,
    pub beta: f64,
    pub mask_strategy: MaskStrategy,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            max_shift: 64,
            lambda: 1.0,
            beta: 2.0,
            mask_strategy: MaskStrategy::Block,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub feature: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(pixel: f64, feature: f64, lambda: f64) -> Self {
        Self {
            pixel,
            feature,
            total: pixel + lambda * feature,
            lambda,
        }
    }

    /// Component-wise mean; the total is recomputed from the means.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let lambda = items.first().map_or(0.0, |l| l.lambda);
        let pixel = items.iter().map(|l| l.pixel).sum::<f64>() / n;
        let feature = items.iter().map(|l| l.feature).sum::<f64>() / n;
        Self::new(pixel, feature, lambda)
    }

    pub fn is_finite(&self) -> bool {
        self.pixel.is_finite() && self.feature.is_finite() && self.total.is_finite()
    }
}

/// Per-patch statistics used to normalise (and later de-normalise) targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub mean: f64,
    pub std: f64,
}

/// `(x - mean) / (std + ε)` per patch, population std over all `T²·C` values.
pub fn normalize_patch_targets(tokens: &Array2<f64>) -> Result<(Array2<f64>, Vec<PatchStats>)> {
    if tokens.ncols() < 2 {
        return Err(Error::arg(
            "patch targets need at least two values per token",
        ));
    }
    let d = tokens.ncols() as f64;
    let mut out = tokens.clone();
    let mut stats = Vec::with_capacity(tokens.nrows());
    for mut row in out.rows_mut() {
        // A constant patch gets its exact value as mean so it maps to zeros.
        let first = row[0];
        let mean = if row.iter().all(|&v| v == first) {
            first
        } else {
            row.sum() / d
        };
        let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d).sqrt();
        row.mapv_inplace(|v| (v - mean) / (std + TARGET_EPS));
        stats.push(PatchStats { mean, std });
    }
    Ok((out, stats))
}

pub fn denormalize_patches(normalized: &Array2<f64>, stats: &[PatchStats]) -> Array2<f64> {
    let mut out = normalized.clone();
    for (mut row, s) in out.rows_mut().into_iter().zip(stats) {
        row.mapv_inplace(|v| v * (s.std + TARGET_EPS) + s.mean);
    }
    out
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!(
            "prediction {:?} and target {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean squared error of each token over its `T²·C` values.
pub fn pixel_loss_per_token(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_same_shape(pred, target)?;
    let diff = &pred - &target;
    Ok((&diff * &diff)
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array1::zeros(0)))
}

/// Pixel loss: per-token MSE averaged over tokens.
pub fn pixel_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    Ok(pixel_loss_per_token(pred, target)?.mean().unwrap_or(0.0))
}

pub fn smooth_l1_scalar(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "smooth-L1 beta must be positive, got {beta}"
        )))
    }
}

/// Smooth-L1 of each token averaged over its channels.
pub fn smooth_l1_per_token(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    beta: f64,
) -> Result<Array1<f64>> {
    check_beta(beta)?;
    check_same_shape(pred, target)?;
    let per_elem = (&pred - &target).mapv(|d| smooth_l1_scalar(d, beta));
    Ok(per_elem
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array1::zeros(0)))
}

/// Smooth-L1 averaged over channels and tokens. `target` is treated as a
/// constant.
pub fn smooth_l1(pred: ArrayView2<f64>, target: ArrayView2<f64>, beta: f64) -> Result<f64> {
    Ok(smooth_l1_per_token(pred, target, beta)?
        .mean()
        .unwrap_or(0.0))
}

/// EMA coefficient at a (fractional) epoch: linear from 0.999 to 0.9999 over
/// `warm_epochs`, constant afterwards.
pub fn gamma_schedule(epoch: f64, warm_epochs: f64) -> f64 {
    let t = if warm_epochs > 0.0 {
        (epoch / warm_epochs).clamp(0.0, 1.0)
    } else {
        1.0
    };
    if t >= 1.0 {
        GAMMA_END
    } else {
        GAMMA_START + (GAMMA_END - GAMMA_START) * t
    }
}

/// `target ← γ·target + (1−γ)·source` over every parameter.
pub fn ema_update<M: Module>(source: &M, target: &mut M, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::arg(format!("gamma {gamma} outside [0, 1]")));
    }
    let src = source.named_params();
    let mut dst = target.named_params_mut();
    if src.len() != dst.len() {
        return Err(Error::Structure(format!(
            "{} source parameters vs {} target parameters",
            src.len(),
            dst.len()
        )));
    }
    for ((src_name, s), (dst_name, d)) in src.iter().zip(dst.iter_mut()) {
        if src_name != dst_name || s.value.dim() != d.value.dim() {
            return Err(Error::Structure(format!(
                "{src_name} {:?} vs {dst_name} {:?}",
                s.value.dim(),
                d.value.dim()
            )));
        }
        d.value
            .zip_mut_with(&s.value, |t, &o| *t = gamma * *t + (1.0 - gamma) * o);
    }
    Ok(())
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Two-layer MLP (pixel regression).
    Mlp(Mlp),
    /// Single fully connected layer (feature prediction).
    Linear(Linear),
}

#[derive(Clone, Debug)]
enum HeadCache {
    Mlp(MlpCache),
    Linear(Array2<f64>),
}

impl Head {
    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, HeadCache) {
        match self {
            Head::Mlp(mlp) => {
                let (y, cache) = mlp.forward(x);
                (y, HeadCache::Mlp(cache))
            }
            Head::Linear(lin) => (lin.forward(x), HeadCache::Linear(x.to_owned())),
        }
    }

    fn backward(&mut self, cache: &HeadCache, grad: ArrayView2<f64>) -> Array2<f64> {
        match (self, cache) {
            (Head::Mlp(mlp), HeadCache::Mlp(c)) => mlp.backward(c, grad),
            (Head::Linear(lin), HeadCache::Linear(x)) => lin.backward(x.view(), grad),
            _ => unreachable!("head cache kind matches head kind"),
        }
    }
}

impl Module for Head {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Head::Mlp(m) => m.params(prefix, out),
            Head::Linear(l) => l.params(prefix, out),
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Head::Mlp(m) => m.params_mut(prefix, out),
            Head::Linear(l) => l.params_mut(prefix, out),
        }
    }
}

/// Light transformer that turns encoded RegionA tokens plus position-tagged
/// mask tokens into one prediction per RegionB patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub input_norm: LayerNorm,
    pub embed: Linear,
    pub mask_token: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    input_norm: LayerNormCache,
    normalized: Array2<f64>,
    context_len: usize,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    head: HeadCache,
}

impl Decoder {
    pub fn new(config: DecoderConfig, encoder_dim: usize, mlp_head: bool, rng: &mut Rng) -> Self {
        let dim = config.embed_dim;
        let embed = Linear::new(encoder_dim, dim, rng);
        let mask_token = Param::normal(1, dim, 0.02, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(dim, config.num_heads, config.mlp_ratio, rng))
            .collect();
        let head = if mlp_head {
            Head::Mlp(Mlp::new(dim, dim, config.output_dim, rng))
        } else {
            Head::Linear(Linear::new(dim, config.output_dim, rng))
        };
        Self {
            config,
            input_norm: LayerNorm::new(encoder_dim),
            embed,
            mask_token,
            blocks,
            norm: LayerNorm::new(dim),
            head,
        }
    }

    /// Input position embeddings of the mask tokens (shared by both decoders).
    pub fn mask_inputs(&self, target_coords: &[GridCoord]) -> Result<Array2<f64>> {
        Ok(sincos_embed_2d(target_coords, self.config.embed_dim)? + &self.mask_token.value)
    }

    /// `encoded` is the encoder output; its first `prefix_len` rows (class
    /// token) carry no position term, the rest sit at `visible_coords`.
    /// Returns one prediction per entry of `target_coords`, in order.
    pub fn forward(
        &self,
        encoded: ArrayView2<f64>,
        prefix_len: usize,
        visible_coords: &[GridCoord],
        target_coords: &[GridCoord],
    ) -> Result<(Array2<f64>, DecoderCache)> {
        if encoded.nrows() != prefix_len + visible_coords.len() {
            return Err(Error::arg(format!(
                "{} encoded rows for {} visible coordinates",
                encoded.nrows(),
                visible_coords.len()
            )));
        }
        if target_coords.is_empty() {
            return Err(Error::arg("decoder needs at least one target coordinate"));
        }
        let dim = self.config.embed_dim;
        let (normalized, input_norm) = self.input_norm.forward(encoded);
        let mut context = self.embed.forward(normalized.view());
        {
            let mut visible = context.slice_mut(s![prefix_len.., ..]);
            visible += &sincos_embed_2d(visible_coords, dim)?;
        }
        let queries = self.mask_inputs(target_coords)?;
        let context_len = context.nrows();
        let mut x = concatenate(Axis(0), &[context.view(), queries.view()]).expect("same width");

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x.view());
            blocks.push(cache);
            x = y;
        }
        let (x, norm) = self.norm.forward(x.view());
        let (out, head) = self.head.forward(x.slice(s![context_len.., ..]));
        Ok((
            out,
            DecoderCache {
                input_norm,
                normalized,
                context_len,
                blocks,
                norm,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `∂L/∂encoded`.
    pub fn backward(&mut self, cache: &DecoderCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let d_head_in = self.head.backward(&cache.head, grad_out);
        let total = cache.context_len + d_head_in.nrows();
        let mut grad = Array2::zeros((total, self.config.embed_dim));
        grad.slice_mut(s![cache.context_len.., ..])
            .assign(&d_head_in);
        grad = self.norm.backward(&cache.norm, grad.view());
        for (block, block_cache) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            grad = block.backward(block_cache, grad.view());
        }
        let d_queries = grad.slice(s![cache.context_len.., ..]);
        self.mask_token.grad += &d_queries.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_normalized = self.embed.backward(
            cache.normalized.view(),
            grad.slice(s![..cache.context_len, ..]),
        );
        self.input_norm
            .backward(&cache.input_norm, d_normalized.view())
    }
}

impl Module for Decoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.input_norm.params(&join(prefix, "input_norm"), out);
        self.embed.params(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.params(&join(prefix, "norm"), out);
        self.head.params(&join(prefix, "head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.input_norm.params_mut(&join(prefix, "input_norm"), out);
        self.embed.params_mut(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.params_mut(&join(prefix, "norm"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

/// One image prepared for the objective: both regions as tokens plus the
/// RegionA mask.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub pad: usize,
    pub shift: (usize, usize),
    pub tokens_a: TokenSequence,
    pub tokens_b: TokenSequence,
    pub layout: MaskLayout,
}

impl PretrainSample {
    pub fn from_pair(pair: &RegionPair, layout: MaskLayout, patch_size: usize) -> Result<Self> {
        let tokens_a = patchify(pair.region_a.view(), patch_size)?;
        let tokens_b = patchify(pair.region_b.view(), patch_size)?;
        if layout.grid != tokens_a.grid {
            return Err(Error::arg(format!(
                "mask grid {:?} does not match patch grid {:?}",
                layout.grid, tokens_a.grid
            )));
        }
        Ok(Self {
            pad: pair.pad,
            shift: pair.shift,
            tokens_a,
            tokens_b,
            layout,
        })
    }

    /// Region sampling, patchification and masking for one image.
    pub fn draw(
        image: &ImageRecord,
        config: &ModelConfig,
        hyper: &PretrainHyper,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pair = sample_cross_region(image, config.image_size, hyper.max_shift, rng)?;
        let layout = generate_mask(hyper.mask_strategy, config.grid(), hyper.mask_ratio, rng)?;
        Self::from_pair(&pair, layout, config.encoder.patch_size)
    }

    /// RegionB token positions in RegionA's frame.
    pub fn relation_coords(&self) -> Vec<GridCoord> {
        relation_coords(self.shift, self.tokens_a.patch_size, self.tokens_a.grid)
    }
}

/// Result of the forward pass on one sample.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub loss: LossBreakdown,
    pub pixel_terms: Array1<f64>,
    pub feature_terms: Array1<f64>,
    pub pixel_pred: Array2<f64>,
    pub pixel_target: Array2<f64>,
    pub patch_stats: Vec<PatchStats>,
    pub feature_pred: Array2<f64>,
    pub feature_target: Array2<f64>,
}

/// Everything the backward pass needs from the forward pass of one sample.
#[derive(Clone, Debug)]
pub struct SampleCache {
    encoder: EncoderCache,
    pixel: DecoderCache,
    feature: DecoderCache,
    d_pixel: Array2<f64>,
    d_feature: Array2<f64>,
}

/// Online encoder, momentum encoder and both decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub config: ModelConfig,
    pub online: Encoder,
    pub momentum: Encoder,
    pub pixel_decoder: Decoder,
    pub feature_decoder: Decoder,
}

impl PretrainModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let online = Encoder::new(config.encoder, &mut rng)?;
        let momentum = online.clone();
        let enc_dim = config.encoder.embed_dim;
        let pixel_decoder = Decoder::new(config.pixel_decoder(), enc_dim, true, &mut rng);
        let feature_decoder = Decoder::new(config.feature_decoder(), enc_dim, false, &mut rng);
        Ok(Self {
            config,
            online,
            momentum,
            pixel_decoder,
            feature_decoder,
        })
    }

    /// Parameters updated by the optimizer (everything except the momentum
    /// encoder).
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.online.params_mut("online", &mut out);
        self.pixel_decoder.params_mut("pixel_decoder", &mut out);
        self.feature_decoder.params_mut("feature_decoder", &mut out);
        out
    }

    pub fn trainable_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.online.params("online", &mut out);
        self.pixel_decoder.params("pixel_decoder", &mut out);
        self.feature_decoder.params("feature_decoder", &mut out);
        out
    }

    /// Standardised momentum-encoder features of the full RegionB.
    pub fn ema_target(&self, tokens_b: &TokenSequence) -> Result<Array2<f64>> {
        encode_tokens(&self.momentum, tokens_b)
    }

    pub fn update_momentum(&mut self, gamma: f64) -> Result<()> {
        ema_update(&self.online, &mut self.momentum, gamma)
    }

    pub fn forward_sample(
        &self,
        sample: &PretrainSample,
        hyper: &PretrainHyper,
    ) -> Result<(SampleForward, SampleCache)> {
        check_beta(hyper.beta)?;
        let split = split_visible(&sample.tokens_a, &sample.layout)?;
        let (encoded, encoder) = self
            .online
            .forward(split.visible.tokens.view(), &split.visible.coords)?;
        let prefix = self.online.prefix_len();
        let targets = sample.relation_coords();

        let (pixel_pred, pixel) =
            self.pixel_decoder
                .forward(encoded.view(), prefix, &split.visible.coords, &targets)?;
        let (feature_pred, feature) = self.feature_decoder.forward(
            encoded.view(),
            prefix,
            &split.visible.coords,
            &targets,
        )?;

        let (pixel_target, patch_stats) = normalize_patch_targets(&sample.tokens_b.tokens)?;
        let feature_target = self.ema_target(&sample.tokens_b)?;

        let pixel_terms = pixel_loss_per_token(pixel_pred.view(), pixel_target.view())?;
        let feature_terms =
            smooth_l1_per_token(feature_pred.view(), feature_target.view(), hyper.beta)?;
        let loss = LossBreakdown::new(
            pixel_terms.mean().unwrap_or(0.0),
            feature_terms.mean().unwrap_or(0.0),
            hyper.lambda,
        );

        let n_pixel = pixel_pred.len() as f64;
        let d_pixel = (&pixel_pred - &pixel_target) * (2.0 / n_pixel);
        let n_feature = feature_pred.len() as f64;
        let d_feature = (&feature_pred - &feature_target)
            .mapv(|d| hyper.lambda * smooth_l1_grad(d, hyper.beta) / n_feature);

        Ok((
            SampleForward {
                loss,
                pixel_terms,
                feature_terms,
                pixel_pred,
                pixel_target,
                patch_stats,
                feature_pred,
                feature_target,
            },
            SampleCache {
                encoder,
                pixel,
                feature,
                d_pixel,
                d_feature,
            },
        ))
    }

    /// Accumulates `scale · ∂L/∂θ` for one sample. The momentum encoder
    /// receives nothing.
    pub fn backward_sample(&mut self, cache: &SampleCache, scale: f64) {
        let d_pixel = &cache.d_pixel * scale;
        let d_feature = &cache.d_feature * scale;
        let mut d_encoded = self.pixel_decoder.backward(&cache.pixel, d_pixel.view());
        d_encoded += &self
            .feature_decoder
            .backward(&cache.feature, d_feature.view());
        self.online.backward(&cache.encoder, d_encoded.view());
    }

    /// Batch-mean loss without gradients.
    pub fn evaluate(
        &self,
        samples: &[PretrainSample],
        hyper: &PretrainHyper,
    ) -> Result<LossBreakdown> {
        let losses = samples
            .iter()
            .map(|s| self.forward_sample(s, hyper).map(|(f, _)| f.loss))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossBreakdown::mean(&losses))
    }

    /// Zeroes gradients, then accumulates gradients of the batch-mean loss.
    pub fn loss_and_grad(
        &mut self,
        samples: &[PretrainSample],
        hyper: &PretrainHyper,
    ) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        self.zero_grad();
        let scale = 1.0 / samples.len() as f64;
        let mut losses = Vec::with_capacity(samples.len());
        for sample in samples {
            let (fwd, cache) = self.forward_sample(sample, hyper)?;
            self.backward_sample(&cache, scale);
            losses.push(fwd.loss);
        }
        Ok(LossBreakdown::mean(&losses))
    }

    /// Region sampling, masking and the batch-mean loss for raw images.
    pub fn forward_pretrain(
        &self,
        images: &[ImageRecord],
        hyper: &PretrainHyper,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        let samples = images
            .iter()
            .map(|img| PretrainSample::draw(img, &self.config, hyper, rng))
            .collect::<Result<Vec<_>>>()?;
        self.evaluate(&samples, hyper)
    }
}

/// Full-sequence encoding at integer grid positions; returns the patch-token
/// outputs standardised per token.
pub fn encode_tokens(encoder: &Encoder, tokens: &TokenSequence) -> Result<Array2<f64>> {
    let (out, _) = encoder.forward(tokens.tokens.view(), &grid_coords(tokens.grid))?;
    Ok(standardize_rows(out.slice(s![encoder.prefix_len().., ..])))
}

impl Module for PretrainModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.online.params(&join(prefix, "online"), out);
        self.momentum.params(&join(prefix, "momentum"), out);
        self.pixel_decoder
            .params(&join(prefix, "pixel_decoder"), out);
        self.feature_decoder
            .params(&join(prefix, "feature_decoder"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.online.params_mut(&join(prefix, "online"), out);
        self.momentum.params_mut(&join(prefix, "momentum"), out);
        self.pixel_decoder
            .params_mut(&join(prefix, "pixel_decoder"), out);
        self.feature_decoder
            .params_mut(&join(prefix, "feature_decoder"), out);
    }
}
