//! Block-wise and random masking over the patch grid.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{index, IndexedRandom};
use rand::Rng as _;

use crate::region::TokenSequence;
use crate::rng::Rng;
use crate::{Error, Result};

/// Smallest block area, in patches.
pub const MIN_BLOCK: usize = 4;
/// Lower bound of the block aspect ratio (upper bound is its reciprocal).
pub const MIN_ASPECT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    Block,
    Random,
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(MaskStrategy::Block),
            "random" => Ok(MaskStrategy::Random),
            other => Err(Error::arg(format!("unknown mask strategy `{other}`"))),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Block => "block",
            MaskStrategy::Random => "random",
        })
    }
}

/// Rectangle on the patch grid, in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockRect {
    pub fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * grid_w + c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLayout {
    pub grid: (usize, usize),
    /// Row-major, `true` = masked.
    pub flags: Vec<bool>,
    pub ratio: f64,
    /// Rectangles placed by block-wise generation, in placement order.
    pub placed_blocks: Vec<BlockRect>,
    /// Cells of the last rectangle that were unmasked to hit the exact count.
    pub trimmed: Vec<usize>,
}

impl MaskLayout {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&m| m).count()
    }

    /// Text grid of `.` (visible) and `#` (masked), one line per grid row.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.flags.len() + self.grid.0);
        for row in self.flags.chunks(self.grid.1) {
            out.extend(row.iter().map(|&m| if m { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }
}

/// Number of masked cells for ratio `r` over `n` cells: `round(r·n)`.
pub fn target_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

fn check_args(grid: (usize, usize), ratio: f64) -> Result<usize> {
    let n = grid.0 * grid.1;
    if n == 0 {
        return Err(Error::arg("mask grid must have at least one cell"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(n)
}

/// BEiT-style block masking with an exact masked count.
///
/// Rectangles of random area and log-uniform aspect ratio are stamped until
/// the count reaches `round(r·N)`; any overshoot is removed by unmasking
/// random cells newly covered by the last rectangle.
pub fn block_wise_mask(grid: (usize, usize), ratio: f64, rng: &mut Rng) -> Result<MaskLayout> {
    let n = check_args(grid, ratio)?;
    let (grid_h, grid_w) = grid;
    let target = target_count(ratio, n);
    let mut flags = vec![false; n];
    let mut count = 0;
    let mut placed_blocks = Vec::new();
    let mut last_new = Vec::new();
    let log_aspect = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());

    while count < target {
        let remaining = target - count;
        let area = rng.random_range(MIN_BLOCK..=MIN_BLOCK.max(remaining)) as f64;
        let aspect = rng.random_range(log_aspect.0..=log_aspect.1).exp();
        let height = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let width = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
        let rect = BlockRect {
            top: rng.random_range(0..=grid_h - height),
            left: rng.random_range(0..=grid_w - width),
            height,
            width,
        };
        last_new.clear();
        for cell in rect.cells(grid_w) {
            if !flags[cell] {
                flags[cell] = true;
                last_new.push(cell);
            }
        }
        count += last_new.len();
        placed_blocks.push(rect);
    }

    let overshoot = count - target;
    let trimmed: Vec<usize> = last_new.choose_multiple(rng, overshoot).copied().collect();
    for &cell in &trimmed {
        flags[cell] = false;
    }

    Ok(MaskLayout {
        grid,
        flags,
        ratio,
        placed_blocks,
        trimmed,
    })
}

/// `round(r·N)` cells chosen uniformly without replacement.
pub fn random_mask(grid: (usize, usize), ratio: f64, rng: &mut Rng) -> Result<MaskLayout> {
    let n = check_args(grid, ratio)?;
    let mut flags = vec![false; n];
    for cell in index::sample(rng, n, target_count(ratio, n)) {
        flags[cell] = true;
    }
    Ok(MaskLayout {
        grid,
        flags,
        ratio,
        placed_blocks: Vec::new(),
        trimmed: Vec::new(),
    })
}

pub fn generate_mask(
    strategy: MaskStrategy,
    grid: (usize, usize),
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskLayout> {
    match strategy {
        MaskStrategy::Block => block_wise_mask(grid, ratio, rng),
        MaskStrategy::Random => random_mask(grid, ratio, rng),
    }
}

/// Visible part of a token sequence plus the (ascending) masked indices.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleSplit {
    pub visible: TokenSequence,
    pub visible_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
}

pub fn split_visible(tokens: &TokenSequence, layout: &MaskLayout) -> Result<VisibleSplit> {
    if tokens.grid != layout.grid || tokens.len() != layout.len() {
        return Err(Error::arg(format!(
            "mask grid {:?} does not match token grid {:?}",
            layout.grid, tokens.grid
        )));
    }
    let (visible_indices, masked_indices): (Vec<usize>, Vec<usize>) =
        (0..layout.len()).partition(|&i| !layout.flags[i]);
    let visible = TokenSequence {
        tokens: tokens.tokens.select(ndarray::Axis(0), &visible_indices),
        coords: visible_indices.iter().map(|&i| tokens.coords[i]).collect(),
        grid: tokens.grid,
        patch_size: tokens.patch_size,
    };
    Ok(VisibleSplit {
        visible,
        visible_indices,
        masked_indices,
    })
}

/// Re-inserts masked rows at their original positions.
pub fn merge_visible(split: &VisibleSplit, masked_rows: &Array2<f64>) -> Result<Array2<f64>> {
    let n = split.visible_indices.len() + split.masked_indices.len();
    let width = split.visible.token_len();
    if masked_rows.nrows() != split.masked_indices.len() || masked_rows.ncols() != width {
        return Err(Error::arg("masked rows do not match the split"));
    }
    let mut out = Array2::zeros((n, width));
    for (row, &i) in split.visible_indices.iter().enumerate() {
        out.row_mut(i).assign(&split.visible.tokens.row(row));
    }
    for (row, &i) in split.masked_indices.iter().enumerate() {
        out.row_mut(i).assign(&masked_rows.row(row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::patchify;
    use crate::rng::seeded;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn extreme_ratios() {
        let mut rng = seeded(1);
        for strategy in [MaskStrategy::Block, MaskStrategy::Random] {
            let none = generate_mask(strategy, (16, 8), 0.0, &mut rng).unwrap();
            assert_eq!(none.masked_count(), 0);
            let all = generate_mask(strategy, (16, 8), 1.0, &mut rng).unwrap();
            assert_eq!(all.masked_count(), 128);
        }
    }

    #[test]
    fn default_block_mask_count() {
        let layout = block_wise_mask((16, 8), 0.75, &mut seeded(42)).unwrap();
        assert_eq!(layout.masked_count(), 96);
        assert!(!layout.placed_blocks.is_empty());
    }

    #[test]
    fn random_mask_small_grid_and_determinism() {
        let a = random_mask((2, 2), 0.5, &mut seeded(3)).unwrap();
        assert_eq!(a.masked_count(), 2);
        let b = random_mask((2, 2), 0.5, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        let c = block_wise_mask((16, 8), 0.4, &mut seeded(3)).unwrap();
        let d = block_wise_mask((16, 8), 0.4, &mut seeded(3)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn random_mask_is_uniform_per_cell() {
        let mut rng = seeded(2024);
        let draws = 10_000;
        let mut hits = [0usize; 128];
        for _ in 0..draws {
            let layout = random_mask((16, 8), 0.75, &mut rng).unwrap();
            for (h, &m) in hits.iter_mut().zip(&layout.flags) {
                *h += m as usize;
            }
        }
        for h in hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.75).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn bad_arguments() {
        let mut rng = seeded(0);
        assert!(block_wise_mask((0, 8), 0.5, &mut rng).is_err());
        assert!(random_mask((4, 2), 1.5, &mut rng).is_err());
        assert!(random_mask((4, 2), -0.1, &mut rng).is_err());
    }

    #[test]
    fn text_grid() {
        let layout = MaskLayout {
            grid: (2, 3),
            flags: vec![true, false, false, false, true, true],
            ratio: 0.5,
            placed_blocks: vec![],
            trimmed: vec![],
        };
        assert_eq!(layout.to_text(), "#..\n.##\n");
    }

    fn tokens(grid: (usize, usize)) -> TokenSequence {
        let t = 2;
        let region = Array3::from_shape_fn((grid.0 * t, grid.1 * t, 3), |(y, x, c)| {
            (y * 100 + x * 3 + c) as f64
        });
        patchify(region.view(), t).unwrap()
    }

    #[test]
    fn split_examples() {
        let seq = tokens((16, 8));
        let empty = random_mask((16, 8), 0.0, &mut seeded(0)).unwrap();
        let split = split_visible(&seq, &empty).unwrap();
        assert_eq!(split.visible, seq);
        assert!(split.masked_indices.is_empty());

        let mut flags = vec![true; 128];
        flags[37] = false;
        let one = MaskLayout {
            flags,
            ..empty.clone()
        };
        let split = split_visible(&seq, &one).unwrap();
        assert_eq!(split.visible.len(), 1);
        assert_eq!(split.visible.coords, vec![(4.0, 5.0)]);
        assert_eq!(split.visible.tokens.row(0), seq.tokens.row(37));

        let layout = block_wise_mask((16, 8), 0.75, &mut seeded(9)).unwrap();
        let split = split_visible(&seq, &layout).unwrap();
        assert_eq!(split.visible.len(), 32);
        assert_eq!(split.masked_indices.len(), 96);
        assert!(split.masked_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_rejects_mismatched_grid() {
        let seq = tokens((4, 2));
        let layout = random_mask((2, 4), 0.5, &mut seeded(0)).unwrap();
        assert!(split_visible(&seq, &layout).is_err());
    }

    proptest! {
        #[test]
        fn exact_count(gh in 1usize..12, gw in 1usize..12, r in 0.0f64..=1.0, seed in 0u64..u64::MAX, block in any::<bool>()) {
            let strategy = if block { MaskStrategy::Block } else { MaskStrategy::Random };
            let layout = generate_mask(strategy, (gh, gw), r, &mut seeded(seed)).unwrap();
            prop_assert_eq!(layout.masked_count(), target_count(r, gh * gw));
        }

        #[test]
        fn block_union_matches_masked_plus_trimmed(r in 0.0f64..=1.0, seed in 0u64..u64::MAX) {
            let layout = block_wise_mask((16, 8), r, &mut seeded(seed)).unwrap();
            let mut union = vec![false; 128];
            for rect in &layout.placed_blocks {
                for cell in rect.cells(8) {
                    union[cell] = true;
                }
            }
            let mut expected = layout.flags.clone();
            for &cell in &layout.trimmed {
                prop_assert!(!layout.flags[cell]);
                expected[cell] = true;
            }
            prop_assert_eq!(union, expected);
        }

        #[test]
        fn split_then_merge_is_identity(r in 0.0f64..=1.0, seed in 0u64..u64::MAX) {
            let seq = tokens((4, 2));
            let layout = random_mask((4, 2), r, &mut seeded(seed)).unwrap();
            let split = split_visible(&seq, &layout).unwrap();
            prop_assert_eq!(split.visible.len() + split.masked_indices.len(), 8);
            let masked = seq.tokens.select(ndarray::Axis(0), &split.masked_indices);
            prop_assert_eq!(merge_visible(&split, &masked).unwrap(), seq.tokens);
        }
    }
}
