//! Derived random streams.
//!
//! Every unit of stochastic work (one question's rollouts, one candidate's
//! hinted rollouts, ...) gets its own generator seeded from the run seed and a
//! path of integers, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream purposes, used as the first path element.
pub mod purpose {
    pub const BATCH: u64 = 1;
    pub const QUESTION: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const FAILED_PICK: u64 = 4;
    pub const HINTS: u64 = 5;
    pub const HINTED_ROLLOUT: u64 = 6;
    pub const HELD_OUT: u64 = 7;
    pub const INIT: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_distinct() {
        let a = derive_seed(1, &[2, 3]);
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3]));
        assert_eq!(a, derive_seed(1, &[2, 3]));
    }
}
