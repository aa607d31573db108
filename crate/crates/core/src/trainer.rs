//! Optimisation loop: warmup + cosine learning rate, EMA schedule, AdamW with
//! decoupled weight decay, per-epoch checkpoints and a CSV metrics log.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{augment_global, DatasetManifest, ImageRecord};
use crate::mask::MaskStrategy;
use crate::nn::Param;
use crate::pretrain::{
    gamma_schedule, LossBreakdown, ModelConfig, PretrainHyper, PretrainModel, PretrainSample,
};
use crate::rng::{mix, sample_rng, seeded, SHUFFLE_STREAM};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub max_shift: i64,
    pub lambda: f64,
    pub beta: f64,
    pub mask_strategy: MaskStrategy,
    /// Epochs over which the EMA coefficient ramps from 0.999 to 0.9999.
    pub momentum_warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 20,
            base_lr: 1.2e-3,
            weight_decay: 0.05,
            batch_size: 64,
            seed: 0,
            mask_ratio: 0.75,
            max_shift: 64,
            lambda: 1.0,
            beta: 2.0,
            mask_strategy: MaskStrategy::Block,
            momentum_warmup_epochs: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> PretrainHyper {
        PretrainHyper {
            mask_ratio: self.mask_ratio,
            max_shift: self.max_shift,
            lambda: self.lambda,
            beta: self.beta,
            mask_strategy: self.mask_strategy,
        }
    }

    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::arg(msg));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0) || !(self.beta > 0.0) || self.weight_decay < 0.0 {
            return fail("base_lr and beta must be positive, weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.max_shift < 0 {
            return fail(format!("max_shift {} is negative", self.max_shift));
        }
        if self.lambda < 0.0 || self.momentum_warmup_epochs < 0.0 {
            return fail("lambda and momentum_warmup_epochs must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then single-cycle cosine decay to 0 at
/// `epochs`. `epoch` is fractional.
pub fn lr_at(epoch: f64, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs as f64;
    let total = config.epochs as f64;
    if epoch < warmup {
        return config.base_lr * epoch / warmup;
    }
    if total <= warmup {
        return config.base_lr;
    }
    let progress = ((epoch - warmup) / (total - warmup)).clamp(0.0, 1.0);
    config.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay. Moments are created lazily per
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: Vec<(String, &mut Param)>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, param) in params {
            let (m, v) = self.moments.entry(name).or_insert_with(|| {
                (
                    Array2::zeros(param.value.raw_dim()),
                    Array2::zeros(param.value.raw_dim()),
                )
            });
            m.zip_mut_with(&param.grad, |m, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g
            });
            v.zip_mut_with(&param.grad, |v, &g| {
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g
            });
            let decay = if param.decay { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut param.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let update = (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based global step.
    pub step: u64,
    pub lr: f64,
    pub gamma: f64,
    pub loss: LossBreakdown,
}

impl StepMetrics {
    /// `step,lr,gamma,loss_pixel,loss_feature,loss_total`
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.gamma, self.loss.pixel, self.loss.feature, self.loss.total
        )
    }
}

pub fn steps_per_epoch(records: usize, batch_size: usize) -> usize {
    records.div_ceil(batch_size)
}

/// Model, optimizer and counters of a pre-training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: PretrainModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: PretrainModel::new(model_config, mix(&[config.seed, 0x1a17]))?,
            optimizer: AdamW::new(config.weight_decay),
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.train,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            train: self.config,
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Sample visiting order for an epoch.
    pub fn epoch_order(&self, records: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..records).collect();
        order.shuffle(&mut seeded(mix(&[self.config.seed, epoch, SHUFFLE_STREAM])));
        order
    }

    /// Augmentation, region sampling and masking for the given record
    /// indices; each sample uses its own `(seed, epoch, index)` stream.
    pub fn prepare_batch(
        &self,
        records: &[ImageRecord],
        indices: &[usize],
        epoch: u64,
    ) -> Result<Vec<PretrainSample>> {
        let hyper = self.config.hyper();
        indices
            .iter()
            .map(|&i| {
                let mut rng = sample_rng(self.config.seed, epoch, i as u64);
                let image = augment_global(&records[i], &mut rng);
                PretrainSample::draw(&image, &self.model.config, &hyper, &mut rng)
            })
            .collect()
    }

    /// Forward, backward, AdamW update at `lr`, then EMA update with `gamma`.
    /// The model is left untouched when the loss is not finite.
    pub fn train_step(
        &mut self,
        samples: &[PretrainSample],
        lr: f64,
        gamma: f64,
    ) -> Result<LossBreakdown> {
        let loss = self.model.loss_and_grad(samples, &self.config.hyper())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                samples: Vec::new(),
            });
        }
        self.optimizer.apply(self.model.trainable_params_mut(), lr);
        self.model.update_momentum(gamma)?;
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `records`; calls `on_step` after every optimizer step.
    pub fn run_epoch(
        &mut self,
        records: &[ImageRecord],
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        if records.is_empty() {
            return Err(Error::arg("cannot train on an empty dataset"));
        }
        let epoch = self.epoch;
        let per_epoch = steps_per_epoch(records.len(), self.config.batch_size);
        let order = self.epoch_order(records.len(), epoch);
        let mut metrics = Vec::with_capacity(per_epoch);
        for batch in order.chunks(self.config.batch_size) {
            let progress = self.step as f64 / per_epoch as f64;
            let lr = lr_at(progress, &self.config);
            let gamma = gamma_schedule(progress, self.config.momentum_warmup_epochs);
            let samples = self.prepare_batch(records, batch, epoch)?;
            let loss = self
                .train_step(&samples, lr, gamma)
                .map_err(|err| match err {
                    Error::NonFinite { step, .. } => Error::NonFinite {
                        step,
                        samples: batch.to_vec(),
                    },
                    other => other,
                })?;
            let m = StepMetrics {
                step: self.step,
                lr,
                gamma,
                loss,
            };
            on_step(&m)?;
            metrics.push(m);
        }
        self.epoch += 1;
        Ok(metrics)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
}

/// Keeps the first `lines` lines of the metrics log (used when resuming).
fn truncate_log(path: &Path, lines: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(file)
        .lines()
        .take(lines as usize)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut text = kept.join("\n");
    if !kept.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) pre-training until `config.epochs`.
///
/// With an output directory, a checkpoint is written after every epoch and
/// each step appends one line to `metrics.csv`.
pub fn train_loop(
    manifest: &DatasetManifest,
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    if manifest.is_empty() {
        return Err(Error::arg("cannot train on an empty manifest"));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            truncate_log(&path, trainer.step)?;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };
    let mut all = Vec::new();
    while trainer.epoch < trainer.config.epochs as u64 {
        let metrics = trainer.run_epoch(&manifest.records, |m| {
            if let Some((path, file)) = log.as_mut() {
                writeln!(file, "{}", m.csv_line()).map_err(|e| Error::io(&*path, e))?;
            }
            log::info!(
                "step {} lr {:.3e} gamma {:.5} loss {:.5} (pixel {:.5}, feature {:.5})",
                m.step,
                m.lr,
                m.gamma,
                m.loss.total,
                m.loss.pixel,
                m.loss.feature
            );
            Ok(())
        })?;
        all.extend(metrics);
        if let Some(dir) = out_dir {
            trainer
                .checkpoint()
                .save(&checkpoint_path(dir, trainer.epoch))?;
        }
    }
    Ok(all)
}
