//! Visual dumps of one training sample: both regions, the mask, RegionB's
//! relation coordinates and optionally the pixel-decoder reconstruction.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::data::{write_png, ImageRecord, CHANNELS};
use crate::mask::generate_mask;
use crate::pretrain::{
    denormalize_patches, ModelConfig, PretrainHyper, PretrainModel, PretrainSample,
};
use crate::region::{sample_cross_region, unpatchify, GridCoord};
use crate::rng::seeded;
use crate::{Error, Result};

/// One `row col` line per coordinate.
pub fn format_coords(coords: &[GridCoord]) -> String {
    coords.iter().map(|(r, c)| format!("{r} {c}\n")).collect()
}

/// Files written by [`write_inspection`].
#[derive(Clone, Debug)]
pub struct InspectionDump {
    pub sample: PretrainSample,
    pub files: Vec<PathBuf>,
}

/// Draws one sample from `image` with a generator seeded by `seed` and writes
/// `region_a.png`, `region_b.png`, `mask.txt`, `coords.txt` and `shift.txt`
/// (`pad shift_row shift_col`) into `out_dir`. With a model, also writes
/// `reconstruction.png`: pixel predictions mapped back through the true
/// per-patch statistics of RegionB.
pub fn write_inspection(
    image: &ImageRecord,
    config: &ModelConfig,
    hyper: &PretrainHyper,
    seed: u64,
    model: Option<&PretrainModel>,
    out_dir: &Path,
) -> Result<InspectionDump> {
    if let Some(model) = model {
        if model.config != *config {
            return Err(Error::arg(
                "checkpoint architecture differs from the configuration",
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = seeded(seed);
    let pair = sample_cross_region(image, config.image_size, hyper.max_shift, &mut rng)?;
    let layout = generate_mask(
        hyper.mask_strategy,
        config.grid(),
        hyper.mask_ratio,
        &mut rng,
    )?;
    let sample = PretrainSample::from_pair(&pair, layout, config.encoder.patch_size)?;

    let mut files = Vec::new();
    let emit_text = |name: &str, text: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    files.push(emit_text("mask.txt", sample.layout.to_text())?);
    files.push(emit_text(
        "coords.txt",
        format_coords(&sample.relation_coords()),
    )?);
    files.push(emit_text(
        "shift.txt",
        format!("{} {} {}\n", sample.pad, sample.shift.0, sample.shift.1),
    )?);

    let mut emit_png = |name: &str, pixels: &Array3<f64>| -> Result<()> {
        let path = out_dir.join(name);
        write_png(pixels.view(), &path)?;
        files.push(path);
        Ok(())
    };
    emit_png("region_a.png", &pair.region_a)?;
    emit_png("region_b.png", &pair.region_b)?;
    if let Some(model) = model {
        let (forward, _) = model.forward_sample(&sample, hyper)?;
        let patches = denormalize_patches(&forward.pixel_pred, &forward.patch_stats);
        let pixels = unpatchify(
            &patches,
            sample.tokens_b.grid,
            config.encoder.patch_size,
            CHANNELS,
        )?;
        emit_png("reconstruction.png", &pixels)?;
    }
    Ok(InspectionDump { sample, files })
}
