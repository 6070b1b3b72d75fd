//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is derived from the
//! experiment seed and a list of tags (epoch, study index, purpose) by
//! SplitMix64 mixing. The derivation depends on nothing but its inputs, so the
//! same seed gives the same masks and data order on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, used as the first tag so that unrelated draws never share a stream.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const VIEW: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const SPLIT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tags_separate_streams() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[2, 1]).random();
        let c: u64 = stream(7, &[1, 2]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn derivation_is_frozen() {
        // Guards against accidental changes to the mixing function.
        assert_eq!(derive_seed(0, &[]), splitmix64(0));
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
