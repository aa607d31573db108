//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "PMAECKPT"
//! version   u32
//! meta_len  u64, then meta_len bytes of UTF-8 `key = value` text
//! count     u32
//! count × { name_len u32, name, rows u64, cols u64, rows·cols × f64 }
//! sha256    32 bytes over everything above
//! ```
//!
//! The metadata holds the model/training configuration plus `state.*`
//! counters. Arrays are the model parameters in module order followed by the
//! optimizer moments (`adam.m.<param>`, `adam.v.<param>`) in name order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::{format_settings, model_and_train, parse_assignments};
use crate::nn::Module;
use crate::pretrain::PretrainModel;
use crate::trainer::{AdamW, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PMAECKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Per-sample seed derivation used by the trainer; recorded so a resumed run
/// can refuse an incompatible scheme.
pub const RNG_SCHEME: &str = "splitmix64-chacha8";

const STATE_KEYS: &[&str] = &[
    "state.epoch",
    "state.step",
    "state.adam_step",
    "state.rng_scheme",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PretrainModel,
    pub optimizer: AdamW,
    pub train: TrainConfig,
    pub epoch: u64,
    pub step: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
}

fn push_array(out: &mut Vec<u8>, name: &str, a: &Array2<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn metadata(&self) -> String {
        let mut meta = format_settings(&self.model.config, &self.train);
        meta.push_str(&format!("state.epoch = {}\n", self.epoch));
        meta.push_str(&format!("state.step = {}\n", self.step));
        meta.push_str(&format!("state.adam_step = {}\n", self.optimizer.step));
        meta.push_str(&format!("state.rng_scheme = {RNG_SCHEME}\n"));
        meta
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata();
        let params = self.model.named_params();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let count = params.len() + 2 * self.optimizer.moments.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, p) in &params {
            push_array(&mut out, name, &p.value);
        }
        for (name, (m, v)) in &self.optimizer.moments {
            push_array(&mut out, &format!("adam.m.{name}"), m);
            push_array(&mut out, &format!("adam.v.{name}"), v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if !body.starts_with(MAGIC) {
            return Err(corrupt("not a checkpoint file"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let meta_len = r.len()?;
        let meta = r.string(meta_len)?;
        let assignments = parse_assignments(&meta)?;
        let (model_config, train) = model_and_train(&assignments, STATE_KEYS)?;
        let state = |key: &str| -> Result<String> {
            assignments
                .get(key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| corrupt(format!("missing `{key}`")))
        };
        let counter = |key: &str| -> Result<u64> {
            state(key)?
                .parse()
                .map_err(|_| corrupt(format!("bad `{key}`")))
        };
        let scheme = state("state.rng_scheme")?;
        if scheme != RNG_SCHEME {
            return Err(corrupt(format!("unsupported rng scheme `{scheme}`")));
        }

        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let array = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            if arrays.insert(name.clone(), array).is_some() {
                return Err(corrupt(format!("duplicate array `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }

        let mut model = PretrainModel::new(model_config, 0)?;
        for (name, param) in model.named_params_mut() {
            let value = arrays
                .remove(&name)
                .ok_or_else(|| corrupt(format!("missing array `{name}`")))?;
            if value.dim() != param.value.dim() {
                return Err(corrupt(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    param.value.dim()
                )));
            }
            param.value = value;
        }

        let mut optimizer = AdamW::new(train.weight_decay);
        optimizer.step = counter("state.adam_step")?;
        for (name, param) in model.trainable_params() {
            let m = arrays.remove(&format!("adam.m.{name}"));
            let v = arrays.remove(&format!("adam.v.{name}"));
            match (m, v) {
                (None, None) => {}
                (Some(m), Some(v)) => {
                    if m.dim() != param.value.dim() || v.dim() != param.value.dim() {
                        return Err(corrupt(format!("moments of `{name}` have the wrong shape")));
                    }
                    optimizer.moments.insert(name, (m, v));
                }
                _ => return Err(corrupt(format!("incomplete moments for `{name}`"))),
            }
        }
        if let Some(name) = arrays.keys().next() {
            return Err(corrupt(format!("unexpected array `{name}`")));
        }
        Ok(Self {
            model,
            optimizer,
            train,
            epoch: counter("state.epoch")?,
            step: counter("state.step")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
