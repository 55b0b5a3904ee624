//! Seeded random streams.
//!
//! Every stochastic component (initialization, batch shuffling, mask
//! sampling, random search) draws from a `ChaCha8Rng` whose seed is derived
//! from a master seed and a path of integer tags, so independent runs never
//! share a stream and any run can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KanRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> KanRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a path of tags into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn derived_rng(master: u64, path: &[u64]) -> KanRng {
    seeded_rng(derive_seed(master, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = derived_rng(7, &[1, 2]).random();
        let b: u64 = derived_rng(7, &[1, 2]).random();
        let c: u64 = derived_rng(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
