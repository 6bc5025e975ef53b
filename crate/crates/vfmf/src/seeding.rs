//! Seed discipline: every component derives its own RNG stream from
//! (global_seed, tag, index) so independent components never interleave
//! draws. The derivation is FNV-1a over the tag followed by two rounds of
//! splitmix64; both are fixed and documented here so runs are reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// 64-bit seed for the stream identified by (global_seed, tag, index).
pub fn derive_seed(global_seed: u64, tag: &str, index: u64) -> u64 {
    let mixed = global_seed
        .wrapping_add(fnv1a64(tag.as_bytes()).wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xd1342543de82ef95));
    splitmix64(splitmix64(mixed))
}

/// ChaCha8 stream for the given component tag and index.
pub fn rng_for(global_seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global_seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_inputs_same_stream() {
        let mut a = rng_for(7, "vae", 0);
        let mut b = rng_for(7, "vae", 0);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn different_tags_differ() {
        let mut a = rng_for(7, "vae", 0);
        let mut b = rng_for(7, "flow", 0);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn global_seed_changes_all_streams() {
        for tag in ["vae", "flow", "world"] {
            assert_ne!(derive_seed(1, tag, 0), derive_seed(2, tag, 0));
        }
    }
}
