//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline is keyed by an explicit
//! `(master seed, domain, indices...)` tuple, so any sample, training step, or
//! command re-run reproduces bit-exactly regardless of execution order. The
//! derivation is a fixed-key SipHash-like mix (splitmix64 rounds), not tied to
//! process state in any way.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a master seed with a domain tag and indices into a single 64-bit key.
pub fn derive_seed(master: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6d61_7269_6f6e_6574); // "marionet"
    for b in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    for ix in indices {
        h = splitmix64(h ^ *ix);
    }
    h
}

/// A ChaCha8 stream seeded from a derived key.
pub fn rng_for(master: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_sensitive() {
        let a = derive_seed(7, "scene", &[1, 2]);
        let b = derive_seed(7, "scene", &[1, 2]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(7, "scene", &[2, 1]));
        assert_ne!(a, derive_seed(7, "audio", &[1, 2]));
        assert_ne!(a, derive_seed(8, "scene", &[1, 2]));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut r1 = rng_for(3, "x", &[0]);
        let mut r2 = rng_for(3, "x", &[0]);
        for _ in 0..16 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }
}
