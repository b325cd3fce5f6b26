//! Counter-style seeding: every independent stream is a ChaCha generator
//! keyed by a short word sequence, so results never depend on draw order
//! across streams or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG keyed by an arbitrary word sequence.
pub fn keyed_rng(words: &[u64]) -> ChaCha20Rng {
    let mut h = 0x6a09_e667_f3bc_c908u64;
    for &w in words {
        h = splitmix(h ^ w);
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        h = splitmix(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha20Rng::from_seed(seed)
}
