//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed by a base seed plus a short
//! path of integers (stream tag, epoch, iteration, ...). Streams never share
//! state, so any stream can be regenerated without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; the exact values are part of the reproducibility contract.
pub mod stream {
    pub const GENERATOR_INIT: u64 = 1;
    pub const DISCRIMINATOR_INIT: u64 = 2;
    pub const POOL_CHOICE: u64 = 3;
    pub const POOL_WEIGHTS: u64 = 4;
    pub const DISTILL_EPOCH: u64 = 5;
    pub const DEPLOY_INIT: u64 = 6;
    pub const DEPLOY_EPOCH: u64 = 7;
    pub const DEPLOY_NOISE: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const TOY_DATA: u64 = 10;
    pub const AUGMENT: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_order_sensitive() {
        assert_ne!(derive(0, &[1, 2]), derive(0, &[2, 1]));
        assert_ne!(derive(0, &[1]), derive(1, &[1]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }
}
