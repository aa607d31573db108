//! Browser demo: mask layouts, cross-region sampling on a synthetic
//! pedestrian, and position-embedding similarity maps.
//!
//! The plain functions do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

use personmae::backbone::sincos_embed_2d;
use personmae::data::{generate_synthetic_person, resize_bilinear, to_rgb8};
use personmae::mask::{generate_mask, MaskStrategy};
use personmae::region::{grid_coords, relation_coords, sample_cross_region};
use personmae::rng::{mix, seeded};

pub const IMAGE_SIZE: (usize, usize) = (256, 128);
pub const PATCH_SIZE: usize = 16;

/// Mask over a `rows × cols` grid as text, `#` masked, `.` visible.
pub fn mask_text(
    rows: usize,
    cols: usize,
    ratio: f64,
    strategy: &str,
    seed: u64,
) -> Result<String, String> {
    let strategy: MaskStrategy = strategy
        .parse()
        .map_err(|e: personmae::Error| e.to_string())?;
    let layout = generate_mask(strategy, (rows, cols), ratio, &mut seeded(seed))
        .map_err(|e| e.to_string())?;
    Ok(layout.to_text())
}

/// One cross-region draw on a synthetic pedestrian.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct CrossRegionView {
    canvas: Vec<u8>,
    canvas_height: usize,
    canvas_width: usize,
    pad: usize,
    shift: (usize, usize),
    coords: String,
}

#[wasm_bindgen]
impl CrossRegionView {
    /// Canvas pixels as RGBA, row-major.
    pub fn canvas_rgba(&self) -> Vec<u8> {
        self.canvas.clone()
    }

    pub fn canvas_height(&self) -> usize {
        self.canvas_height
    }

    pub fn canvas_width(&self) -> usize {
        self.canvas_width
    }

    pub fn region_height(&self) -> usize {
        IMAGE_SIZE.0
    }

    pub fn region_width(&self) -> usize {
        IMAGE_SIZE.1
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn shift_row(&self) -> usize {
        self.shift.0
    }

    pub fn shift_col(&self) -> usize {
        self.shift.1
    }

    /// First few RegionB token positions in RegionA's frame, `row col` lines.
    pub fn coords(&self) -> String {
        self.coords.clone()
    }
}

pub fn cross_region(identity: i64, max_shift: i64, seed: u64) -> Result<CrossRegionView, String> {
    let image = generate_synthetic_person(mix(&[seed, 1]), identity);
    let mut rng = seeded(seed);
    let pair =
        sample_cross_region(&image, IMAGE_SIZE, max_shift, &mut rng).map_err(|e| e.to_string())?;
    let (h, w) = pair.canvas_size();
    let canvas = resize_bilinear(image.pixels.view(), h, w);
    let rgba = to_rgb8(canvas.view())
        .pixels()
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect();
    let grid = (IMAGE_SIZE.0 / PATCH_SIZE, IMAGE_SIZE.1 / PATCH_SIZE);
    let coords = relation_coords(pair.shift, PATCH_SIZE, grid)
        .iter()
        .take(grid.1)
        .map(|(r, c)| format!("{r} {c}\n"))
        .collect();
    Ok(CrossRegionView {
        canvas: rgba,
        canvas_height: h,
        canvas_width: w,
        pad: pair.pad,
        shift: pair.shift,
        coords,
    })
}

/// Cosine similarity between the position embedding at `(row, col)` and the
/// embedding of every integer cell of a `rows × cols` grid, row-major.
pub fn similarity_map(
    rows: usize,
    cols: usize,
    dim: usize,
    row: f64,
    col: f64,
) -> Result<Vec<f64>, String> {
    let cells = grid_coords((rows, cols));
    let grid = sincos_embed_2d(&cells, dim).map_err(|e| e.to_string())?;
    let probe = sincos_embed_2d(&[(row, col)], dim).map_err(|e| e.to_string())?;
    let probe = probe.row(0);
    let probe_norm = probe.dot(&probe).sqrt();
    Ok(grid
        .rows()
        .into_iter()
        .map(|e| e.dot(&probe) / (e.dot(&e).sqrt() * probe_norm))
        .collect())
}

#[wasm_bindgen(js_name = maskLayout)]
pub fn mask_layout(
    rows: usize,
    cols: usize,
    ratio: f64,
    strategy: &str,
    seed: u64,
) -> Result<String, JsError> {
    mask_text(rows, cols, ratio, strategy, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = crossRegion)]
pub fn cross_region_js(
    identity: i64,
    max_shift: i64,
    seed: u64,
) -> Result<CrossRegionView, JsError> {
    cross_region(identity, max_shift, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = positionSimilarity)]
pub fn position_similarity(
    rows: usize,
    cols: usize,
    dim: usize,
    row: f64,
    col: f64,
) -> Result<Vec<f64>, JsError> {
    similarity_map(rows, cols, dim, row, col).map_err(|e| JsError::new(&e))
}
