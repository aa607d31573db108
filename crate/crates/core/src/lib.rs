//! Cross-region masked-autoencoder pre-training for person re-identification.
//!
//! The pipeline takes a pedestrian image, resizes it onto a slightly larger
//! canvas and crops two same-size regions from it. The first region is
//! block-masked and its visible patches are encoded by a ViT; two light
//! decoders then predict the *second* region, one in normalized pixel space
//! and one in the feature space of an EMA copy of the encoder.
//!
//! Everything runs on the CPU in `f64` with hand-written backward passes, so
//! the whole objective can be checked against finite differences.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod inspect;
pub mod mask;
pub mod nn;
pub mod pretrain;
pub mod region;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
