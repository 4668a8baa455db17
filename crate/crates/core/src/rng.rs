//! Named, seeded random streams.
//!
//! Every consumer of randomness derives its own generator from
//! `(base seed, stream name, index)`. Streams never share state, so the
//! order in which components run (or whether a run was resumed) cannot
//! change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a sequence of byte chunks, with a separator between
/// chunks so `("ab", "c")` and `("a", "bc")` differ.
pub fn stable_hash<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn stream_seed(base: u64, stream: &str, index: u64) -> u64 {
    stable_hash([
        &base.to_le_bytes()[..],
        stream.as_bytes(),
        &index.to_le_bytes()[..],
    ])
}

pub fn stream(base: u64, stream: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, stream, index))
}

/// A uniform draw in `[0, 1)` keyed by arbitrary labels; used by mocks that
/// need one fixed random number per (item, position).
pub fn keyed_uniform(base: u64, labels: &[&[u8]]) -> f64 {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(labels.len() + 1);
    let seed = base.to_le_bytes();
    parts.push(&seed);
    parts.extend_from_slice(labels);
    let h = stable_hash(parts);
    // splitmix64 finalizer spreads low-entropy FNV output
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
