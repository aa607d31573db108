//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys are errors.
//! The `model` key picks a preset (`tiny`, `vit-s`, `vit-b`); individual
//! architecture keys override it regardless of line order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::pretrain::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MODEL_KEYS: &[&str] = &[
    "image_height",
    "image_width",
    "patch_size",
    "embed_dim",
    "depth",
    "num_heads",
    "mlp_ratio",
    "use_class_token",
    "decoder_embed_dim",
    "decoder_num_heads",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "warmup_epochs",
    "base_lr",
    "weight_decay",
    "batch_size",
    "seed",
    "mask_ratio",
    "max_shift",
    "lambda",
    "beta",
    "mask_strategy",
    "momentum_warmup_epochs",
];

pub const PATH_KEYS: &[&str] = &["train_dir", "output_dir"];

pub const DEFAULT_MODEL: &str = "vit-b";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset(DEFAULT_MODEL).expect("known preset"),
            train: TrainConfig::default(),
            train_dir: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Parsed `key = value` pairs with the line each came from.
pub type Assignments = BTreeMap<String, (usize, String)>;

pub fn parse_assignments(text: &str) -> Result<Assignments> {
    let mut out = Assignments::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim().to_string();
        if out
            .insert(key.clone(), (line_no, value.trim().to_string()))
            .is_some()
        {
            return Err(Error::Config {
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, (line, raw): &(usize, String)) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line: *line,
        message: format!("invalid value `{raw}` for `{key}`"),
    })
}

fn set<T: FromStr>(map: &Assignments, key: &str, slot: &mut T) -> Result<()> {
    if let Some(entry) = map.get(key) {
        *slot = value(key, entry)?;
    }
    Ok(())
}

fn apply_model(map: &Assignments, model: &mut ModelConfig) -> Result<()> {
    if let Some((line, name)) = map.get("model") {
        *model = ModelConfig::preset(name).map_err(|e| Error::Config {
            line: *line,
            message: e.to_string(),
        })?;
    }
    set(map, "image_height", &mut model.image_size.0)?;
    set(map, "image_width", &mut model.image_size.1)?;
    let enc = &mut model.encoder;
    set(map, "patch_size", &mut enc.patch_size)?;
    set(map, "embed_dim", &mut enc.embed_dim)?;
    set(map, "depth", &mut enc.depth)?;
    set(map, "num_heads", &mut enc.num_heads)?;
    set(map, "mlp_ratio", &mut enc.mlp_ratio)?;
    set(map, "use_class_token", &mut enc.use_class_token)?;
    set(map, "decoder_embed_dim", &mut model.decoder_embed_dim)?;
    set(map, "decoder_num_heads", &mut model.decoder_num_heads)?;
    Ok(())
}

fn apply_train(map: &Assignments, train: &mut TrainConfig) -> Result<()> {
    set(map, "epochs", &mut train.epochs)?;
    set(map, "warmup_epochs", &mut train.warmup_epochs)?;
    set(map, "base_lr", &mut train.base_lr)?;
    set(map, "weight_decay", &mut train.weight_decay)?;
    set(map, "batch_size", &mut train.batch_size)?;
    set(map, "seed", &mut train.seed)?;
    set(map, "mask_ratio", &mut train.mask_ratio)?;
    set(map, "max_shift", &mut train.max_shift)?;
    set(map, "lambda", &mut train.lambda)?;
    set(map, "beta", &mut train.beta)?;
    set(map, "mask_strategy", &mut train.mask_strategy)?;
    set(
        map,
        "momentum_warmup_epochs",
        &mut train.momentum_warmup_epochs,
    )?;
    Ok(())
}

/// Model and training settings from assignments, rejecting anything not in
/// `allowed`.
pub fn model_and_train(
    map: &Assignments,
    extra_allowed: &[&str],
) -> Result<(ModelConfig, TrainConfig)> {
    for key in map.keys() {
        let known = key == "model"
            || MODEL_KEYS.contains(&key.as_str())
            || TRAIN_KEYS.contains(&key.as_str())
            || extra_allowed.contains(&key.as_str());
        if !known {
            return Err(Error::UnknownKey(key.clone()));
        }
    }
    let mut model = ModelConfig::preset(DEFAULT_MODEL)?;
    apply_model(map, &mut model)?;
    let mut train = TrainConfig::default();
    apply_train(map, &mut train)?;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_assignments(text)?;
        let (model, train) = model_and_train(&map, PATH_KEYS)?;
        let defaults = RunConfig::default();
        Ok(Self {
            model,
            train,
            train_dir: map.get("train_dir").map(|(_, v)| PathBuf::from(v)),
            output_dir: map
                .get("output_dir")
                .map(|(_, v)| PathBuf::from(v))
                .unwrap_or(defaults.output_dir),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format_settings(&self.model, &self.train);
        if let Some(dir) = &self.train_dir {
            out.push_str(&format!("train_dir = {}\n", dir.display()));
        }
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out
    }
}

/// Every model and training key, one per line, in a fixed order.
pub fn format_settings(model: &ModelConfig, train: &TrainConfig) -> String {
    let enc = &model.encoder;
    let pairs: Vec<(&str, String)> = vec![
        ("image_height", model.image_size.0.to_string()),
        ("image_width", model.image_size.1.to_string()),
        ("patch_size", enc.patch_size.to_string()),
        ("embed_dim", enc.embed_dim.to_string()),
        ("depth", enc.depth.to_string()),
        ("num_heads", enc.num_heads.to_string()),
        ("mlp_ratio", enc.mlp_ratio.to_string()),
        ("use_class_token", enc.use_class_token.to_string()),
        ("decoder_embed_dim", model.decoder_embed_dim.to_string()),
        ("decoder_num_heads", model.decoder_num_heads.to_string()),
        ("epochs", train.epochs.to_string()),
        ("warmup_epochs", train.warmup_epochs.to_string()),
        ("base_lr", train.base_lr.to_string()),
        ("weight_decay", train.weight_decay.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("seed", train.seed.to_string()),
        ("mask_ratio", train.mask_ratio.to_string()),
        ("max_shift", train.max_shift.to_string()),
        ("lambda", train.lambda.to_string()),
        ("beta", train.beta.to_string()),
        ("mask_strategy", train.mask_strategy.to_string()),
        (
            "momentum_warmup_epochs",
            train.momentum_warmup_epochs.to_string(),
        ),
    ];
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
