//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for substream `name[index]` of `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_by_name_and_index() {
        assert_ne!(substream(1, "init", 0), substream(1, "sampler", 0));
        assert_ne!(substream(1, "init", 0), substream(1, "init", 1));
        assert_eq!(substream(7, "corpus", 3), substream(7, "corpus", 3));
    }
}
