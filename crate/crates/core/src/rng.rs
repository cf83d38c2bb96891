//! Named random sub-streams derived from one run seed.
//!
//! Every consumer (parameter init, epoch shuffles, answer sampling, dropout,
//! corpus generation) gets its own ChaCha stream keyed by a name and a list of
//! counters, so changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream `name` of run `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    derive(seed, name, &[])
}

/// Stream `name` of run `seed`, further keyed by `counters` (epoch, step, sample…).
pub fn derive(seed: u64, name: &str, counters: &[u64]) -> Rng {
    let mut key = fnv1a(FNV_OFFSET, name.as_bytes());
    for &c in counters {
        key = mix(key ^ mix(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}
