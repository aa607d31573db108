#![allow(dead_code)]

use ndarray::Array2;
use personmae::backbone::EncoderConfig;
use personmae::data::{
    generate_synthetic_person, resize_bilinear, DatasetManifest, ImageRecord, Split,
};
use personmae::mask::MaskStrategy;
use personmae::nn::Module;
use personmae::pretrain::{ModelConfig, PretrainHyper, PretrainModel, PretrainSample};
use personmae::rng::seeded;
use personmae::trainer::TrainConfig;

/// 8×4 images with 2×2 patches: a 4×2 grid.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: (8, 4),
        encoder: EncoderConfig {
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            channels: 3,
            use_class_token: true,
        },
        decoder_embed_dim: 16,
        decoder_num_heads: 2,
    }
}

pub fn micro_image(seed: u64) -> ImageRecord {
    let img = generate_synthetic_person(seed, seed as i64);
    let pixels = resize_bilinear(img.pixels.view(), 12, 6);
    ImageRecord::new(pixels, img.identity_id, 0).unwrap()
}

pub fn synthetic_manifest(count: usize, seed: u64) -> DatasetManifest {
    let records = (0..count)
        .map(|i| generate_synthetic_person(seed * 1000 + i as u64, (i % 4) as i64))
        .collect();
    DatasetManifest {
        records,
        split: Split::Pretrain,
    }
}

/// Tiny model, batch 4, short schedule.
pub fn small_run(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1.min(epochs),
        base_lr: 1e-3,
        batch_size: 4,
        seed,
        max_shift: 16,
        ..TrainConfig::default()
    }
}

/// Largest violation of `|a - n| <= 1e-4·max(|a|, |n|) + 1e-8` over sampled
/// entries of every trainable parameter, for the batch-mean total loss.
/// Returns (worst ratio of error to tolerance, offending entry, groups checked).
pub fn pretrain_gradient_check(seed: u64, hyper: &PretrainHyper) -> (f64, String, usize) {
    let config = micro_config();
    let mut model = PretrainModel::new(config, seed).unwrap();
    // Distinct momentum weights so the target is not a function of online.
    let mut rng = seeded(seed + 1);
    for (_, p) in model.momentum.named_params_mut() {
        p.value += &Array2::from_shape_fn(p.value.dim(), |_| {
            0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
        });
    }
    let samples: Vec<PretrainSample> = (0..2)
        .map(|i| PretrainSample::draw(&micro_image(seed + i), &config, hyper, &mut rng).unwrap())
        .collect();
    model.loss_and_grad(&samples, hyper).unwrap();
    let analytic: Vec<(String, Array2<f64>)> = model
        .trainable_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (idx, (name, grad)) in analytic.iter().enumerate() {
        let stride = (grad.len() / 12).max(1);
        for flat in (0..grad.len()).step_by(stride) {
            let (r, c) = (flat / grad.ncols(), flat % grad.ncols());
            let mut probe = model.clone();
            probe.trainable_params_mut()[idx].1.value[[r, c]] += h;
            let up = probe.evaluate(&samples, hyper).unwrap().total;
            probe.trainable_params_mut()[idx].1.value[[r, c]] -= 2.0 * h;
            let down = probe.evaluate(&samples, hyper).unwrap().total;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[[r, c]];
            let ratio = (a - numeric).abs() / (1e-4 * a.abs().max(numeric.abs()) + 1e-8);
            if ratio > worst.0 {
                worst = (
                    ratio,
                    format!("{name}[{r},{c}] analytic {a:e} numeric {numeric:e}"),
                );
            }
        }
    }
    (worst.0, worst.1, analytic.len())
}

pub fn default_hyper(strategy: MaskStrategy) -> PretrainHyper {
    PretrainHyper {
        max_shift: 4,
        mask_strategy: strategy,
        ..PretrainHyper::default()
    }
}
