//! Seed derivation for the per-sample determinism contract.
//!
//! Every random draw in the data path comes from a generator seeded by
//! `mix(global_seed, epoch, sample_index)`, so results do not depend on batch
//! composition, iteration order or how many samples ran before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Stream tag used for the per-epoch shuffle.
pub const SHUFFLE_STREAM: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of words.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5eed_u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn sample_rng(global_seed: u64, epoch: u64, sample_index: u64) -> Rng {
    seeded(mix(&[global_seed, epoch, sample_index]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn sample_streams_are_reproducible_and_distinct() {
        let a: u64 = sample_rng(7, 1, 3).random();
        let b: u64 = sample_rng(7, 1, 3).random();
        let c: u64 = sample_rng(7, 1, 4).random();
        let d: u64 = sample_rng(7, 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
    }
}
