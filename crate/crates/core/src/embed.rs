//! Seeded stub embeddings.
//!
//! When no embedding artifact is supplied, per-token vectors are generated
//! from a documented 64-bit hash so that every platform produces bit-identical
//! values. The scheme, normative for the artifact interface:
//!
//! 1. `key = fnv1a64(utf8 bytes of the example key)` — the example key is the
//!    record's `embedding_ref` when present, otherwise `ex<corpus index>`
//!    (decimal, no padding).
//! 2. For token `t` and dimension `j`:
//!    `h = splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ key) ^ t) ^ j)`
//! 3. `value = (h >> 11) as f64 / 2^53 * 0.2 - 0.1`, i.e. uniform in
//!    `[-0.1, 0.1)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::matrix::Matrix;

/// SplitMix64 finalizer (Steele, Lea & Flood); one full mixing round.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, 64-bit variant.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Map a hash to the unit interval `[0, 1)` using the top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / 9_007_199_254_740_992.0
}

/// The example key used by the stub when the record carries no
/// `embedding_ref`: `ex<index>` with the 0-based corpus position.
pub fn default_example_key(index: usize) -> String {
    format!("ex{index}")
}

fn stub_value(seed_state: u64, token: usize, dim: usize) -> f64 {
    let h = splitmix64(splitmix64(seed_state ^ token as u64) ^ dim as u64);
    unit_interval(h) * 0.2 - 0.1
}

/// Deterministic stub embedding matrix for one example (`n` tokens x `d`).
pub fn stub_embeddings(seed: u64, example_key: &str, n: usize, d: usize) -> Matrix<f64> {
    let state = splitmix64(splitmix64(seed) ^ fnv1a64(example_key.as_bytes()));
    Matrix::from_fn(n, d, |t, j| stub_value(state, t, j))
}

/// Deterministic vector for a token *string*; used by the synthetic corpus
/// generator so that identical surface tokens share identical embeddings.
pub fn token_identity_vector(seed: u64, token: &str, d: usize) -> Vec<f64> {
    let state = splitmix64(splitmix64(seed) ^ fnv1a64(token.as_bytes()));
    (0..d).map(|j| stub_value(state, 0, j)).collect()
}
