//! Cross-region generation, patchification and the RegionA→RegionB
//! coordinate relation.

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::Rng as _;

use crate::data::{resize_bilinear, ImageRecord};
use crate::rng::Rng;
use crate::{Error, Result};

/// Real-valued (row, col) position on the patch grid.
pub type GridCoord = (f64, f64);

/// Two same-size crops of one resized image.
///
/// RegionA always starts at the canvas origin; RegionB starts at `shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair {
    pub region_a: Array3<f64>,
    pub region_b: Array3<f64>,
    /// Canvas padding `p`: the canvas is `(H + p) × (W + floor(p / 2))`.
    pub pad: usize,
    /// Top-left corner of RegionB on the canvas, in pixels (row, col).
    pub shift: (usize, usize),
    pub region_size: (usize, usize),
}

impl RegionPair {
    pub fn canvas_size(&self) -> (usize, usize) {
        canvas_size(self.region_size, self.pad)
    }
}

pub fn canvas_size((h, w): (usize, usize), pad: usize) -> (usize, usize) {
    (h + pad, w + pad / 2)
}

/// Deterministic half of [`sample_cross_region`]: resize onto the padded
/// canvas and cut both regions.
pub fn cross_region_at(
    image: &ImageRecord,
    region_size: (usize, usize),
    pad: usize,
    shift: (usize, usize),
) -> Result<RegionPair> {
    let (h, w) = region_size;
    if h == 0 || w == 0 {
        return Err(Error::arg("region size must be positive"));
    }
    if shift.0 > pad || shift.1 > pad / 2 {
        return Err(Error::arg(format!(
            "shift {shift:?} outside [0, {pad}] x [0, {}]",
            pad / 2
        )));
    }
    let (canvas_h, canvas_w) = canvas_size(region_size, pad);
    let canvas = resize_bilinear(image.pixels.view(), canvas_h, canvas_w);
    let region_a = canvas.slice(s![..h, ..w, ..]).to_owned();
    let region_b = canvas
        .slice(s![shift.0..shift.0 + h, shift.1..shift.1 + w, ..])
        .to_owned();
    Ok(RegionPair {
        region_a,
        region_b,
        pad,
        shift,
        region_size,
    })
}

/// Random resize to `(H + p, W + floor(p/2))` with `p ~ U{0..=m}`, then
/// RegionA at the origin and RegionB at `(U{0..=p}, U{0..=floor(p/2)})`.
pub fn sample_cross_region(
    image: &ImageRecord,
    region_size: (usize, usize),
    max_shift: i64,
    rng: &mut Rng,
) -> Result<RegionPair> {
    if max_shift < 0 {
        return Err(Error::arg(format!(
            "max shift must be >= 0, got {max_shift}"
        )));
    }
    let pad = rng.random_range(0..=max_shift as usize);
    let shift = (rng.random_range(0..=pad), rng.random_range(0..=pad / 2));
    cross_region_at(image, region_size, pad, shift)
}

/// Flattened non-overlapping patches of one region, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// One row per patch, `T·T·C` values each, flattened row, column, channel.
    pub tokens: Array2<f64>,
    pub coords: Vec<GridCoord>,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token_len(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Integer grid coordinates in row-major order.
pub fn grid_coords(grid: (usize, usize)) -> Vec<GridCoord> {
    (0..grid.0)
        .flat_map(|r| (0..grid.1).map(move |c| (r as f64, c as f64)))
        .collect()
}

pub fn patchify(region: ArrayView3<f64>, patch_size: usize) -> Result<TokenSequence> {
    let (h, w, c) = region.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::arg(format!(
            "region {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let grid = (h / patch_size, w / patch_size);
    let n = grid.0 * grid.1;
    let mut tokens = Array2::zeros((n, patch_size * patch_size * c));
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            let patch = region.slice(s![
                gr * patch_size..(gr + 1) * patch_size,
                gc * patch_size..(gc + 1) * patch_size,
                ..
            ]);
            let mut row = tokens.row_mut(gr * grid.1 + gc);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        coords: grid_coords(grid),
        grid,
        patch_size,
    })
}

/// Inverse of [`patchify`] for a full row-major token set.
pub fn unpatchify(
    tokens: &Array2<f64>,
    grid: (usize, usize),
    patch_size: usize,
    channels: usize,
) -> Result<Array3<f64>> {
    if tokens.nrows() != grid.0 * grid.1 || tokens.ncols() != patch_size * patch_size * channels {
        return Err(Error::arg(format!(
            "tokens {:?} do not match grid {grid:?} with patch {patch_size} and {channels} channels",
            tokens.dim()
        )));
    }
    let mut out = Array3::zeros((grid.0 * patch_size, grid.1 * patch_size, channels));
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            let mut patch = out.slice_mut(s![
                gr * patch_size..(gr + 1) * patch_size,
                gc * patch_size..(gc + 1) * patch_size,
                ..
            ]);
            for (dst, src) in patch.iter_mut().zip(tokens.row(gr * grid.1 + gc).iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Positions of RegionB's tokens in RegionA's patch-grid frame:
/// `(row + shift_h / T, col + shift_w / T)`.
pub fn relation_coords(
    shift: (usize, usize),
    patch_size: usize,
    grid: (usize, usize),
) -> Vec<GridCoord> {
    let dr = shift.0 as f64 / patch_size as f64;
    let dc = shift.1 as f64 / patch_size as f64;
    grid_coords(grid)
        .into_iter()
        .map(|(r, c)| (r + dr, c + dc))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_person;
    use crate::rng::seeded;
    use ndarray::Array;
    use proptest::prelude::*;

    #[test]
    fn zero_max_shift_gives_identical_regions() {
        let img = generate_synthetic_person(1, 1);
        let pair = sample_cross_region(&img, (256, 128), 0, &mut seeded(3)).unwrap();
        assert_eq!(pair.pad, 0);
        assert_eq!(pair.shift, (0, 0));
        assert_eq!(pair.region_a, pair.region_b);
    }

    #[test]
    fn negative_max_shift_is_rejected() {
        let img = generate_synthetic_person(1, 1);
        assert!(sample_cross_region(&img, (256, 128), -1, &mut seeded(3)).is_err());
    }

    #[test]
    fn sampled_bounds_for_default_shift() {
        let img = generate_synthetic_person(1, 1);
        let mut rng = seeded(5);
        let mut saw_pad_32 = false;
        for _ in 0..200 {
            let pair = sample_cross_region(&img, (256, 128), 64, &mut rng).unwrap();
            assert!(pair.pad <= 64);
            assert!(pair.shift.0 <= pair.pad && pair.shift.1 <= pair.pad / 2);
            assert_eq!(pair.region_a.dim(), (256, 128, 3));
            assert_eq!(pair.region_b.dim(), (256, 128, 3));
            if pair.pad == 32 {
                saw_pad_32 = true;
                assert_eq!(pair.canvas_size(), (288, 144));
                assert!(pair.shift.0 <= 32 && pair.shift.1 <= 16);
            }
        }
        assert!(saw_pad_32);
    }

    #[test]
    fn maximal_shift_takes_lower_right_crop() {
        let img = generate_synthetic_person(2, 5);
        let pair = cross_region_at(&img, (256, 128), 64, (64, 32)).unwrap();
        assert_eq!(pair.canvas_size(), (320, 160));
        let canvas = resize_bilinear(img.pixels.view(), 320, 160);
        assert_eq!(pair.region_b, canvas.slice(s![64..320, 32..160, ..]));
        assert_eq!(pair.region_a, canvas.slice(s![0..256, 0..128, ..]));
        assert!(cross_region_at(&img, (256, 128), 64, (65, 0)).is_err());
        assert!(cross_region_at(&img, (256, 128), 64, (0, 33)).is_err());
    }

    #[test]
    fn patchify_default_resolution() {
        let region = Array3::from_elem((256, 128, 3), 0.5);
        let seq = patchify(region.view(), 16).unwrap();
        assert_eq!(seq.len(), 128);
        assert_eq!(seq.token_len(), 768);
        assert_eq!(seq.grid, (16, 8));
        assert!(seq.tokens.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patchify_row_major_order() {
        let region = Array::from_shape_vec((2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let seq = patchify(region.view(), 1).unwrap();
        let flat: Vec<f64> = seq.tokens.iter().copied().collect();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            seq.coords,
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
        );
    }

    #[test]
    fn patchify_rejects_ragged_sizes() {
        let region = Array3::<f64>::zeros((10, 8, 3));
        assert!(patchify(region.view(), 4).is_err());
        assert!(patchify(region.view(), 0).is_err());
    }

    #[test]
    fn relation_coords_examples() {
        let grid = (16, 8);
        assert_eq!(relation_coords((0, 0), 16, grid), grid_coords(grid));
        let shifted = relation_coords((16, 16), 16, grid);
        let quarter = relation_coords((8, 4), 16, grid);
        for ((r, c), ((sr, sc), (qr, qc))) in grid_coords(grid)
            .into_iter()
            .zip(shifted.into_iter().zip(quarter))
        {
            assert_eq!((sr, sc), (r + 1.0, c + 1.0));
            assert_eq!((qr, qc), (r + 0.5, c + 0.25));
        }
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(gh in 1usize..5, gw in 1usize..5, t in 1usize..5, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let region = Array3::from_shape_fn((gh * t, gw * t, 3), |_| rng.random::<f64>());
            let seq = patchify(region.view(), t).unwrap();
            let back = unpatchify(&seq.tokens, seq.grid, t, 3).unwrap();
            prop_assert_eq!(back, region);
        }

        #[test]
        fn region_b_window_inside_canvas(m in 0i64..80, seed in 0u64..10_000) {
            let img = ImageRecord::new(Array3::from_elem((16, 8, 3), 0.3), 0, 0).unwrap();
            let pair = sample_cross_region(&img, (16, 8), m, &mut seeded(seed)).unwrap();
            let (ch, cw) = pair.canvas_size();
            prop_assert!(pair.pad as i64 <= m);
            prop_assert!(pair.shift.0 + 16 <= ch);
            prop_assert!(pair.shift.1 + 8 <= cw);
        }

        #[test]
        fn relation_coords_monotone_in_shift(a in 0usize..64, b in 0usize..64, da in 0usize..16, db in 0usize..16) {
            let lo = relation_coords((a, b), 16, (4, 2));
            let hi = relation_coords((a + da, b + db), 16, (4, 2));
            for ((r0, c0), (r1, c1)) in lo.into_iter().zip(hi) {
                prop_assert!(r1 >= r0 && c1 >= c0);
            }
        }
    }
}
