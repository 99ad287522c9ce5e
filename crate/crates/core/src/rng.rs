//! Seeded, portable random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream whose 64-bit
//! seed is derived from the run seed and a path of tags, e.g.
//! `[SPLIT, 0, NOISE, 17]` for the noise of example 17 in split A. Tags are
//! folded in with the SplitMix64 finalizer, so streams for different paths are
//! statistically independent and the derivation does not depend on platform,
//! thread count or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tag namespaces used when deriving substreams.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const ASSIGN: u64 = 0x4153_474e;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const FLIP: u64 = 0x464c_4950;
    pub const ORDER: u64 = 0x4f52_4452;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const TRIAL: u64 = 0x5452_494c;
    pub const REMOVAL: u64 = 0x524d_564c;
    pub const EVAL: u64 = 0x4556_414c;
    pub const PHASE: u64 = 0x5048_5345;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a tag path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| {
            splitmix64(acc.rotate_left(23).wrapping_mul(0xd1b5_4a32_d192_ed03) ^ t)
        })
}

/// Generator for the substream identified by `path` under `seed`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let mut a = substream(7, &[tag::SPLIT, 0, tag::NOISE, 3]);
        let mut b = substream(7, &[tag::SPLIT, 0, tag::NOISE, 3]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn paths_are_order_sensitive() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
        assert_ne!(derive_seed(0, &[]), derive_seed(0, &[0]));
    }
}
