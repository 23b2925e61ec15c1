//! Deterministic random streams.
//!
//! Every source of randomness in the crate (init, shuffling, dropout, data
//! jitter) draws from a ChaCha20 stream keyed by `(seed, label, index)`. The
//! streams are pure functions of their key, so a training run can be resumed
//! from any step and replay the exact trajectory without serializing RNG state.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 step; used only to expand a key into 32 seed bytes.
fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    let _ = z ^ (z >> 31);
}

fn mix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label so distinct purposes get distinct streams.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A reproducible stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut state = seed ^ label_hash(label) ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d);
    splitmix64(&mut state); // decorrelate adjacent indices
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&mix(&mut state).to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// Standard normal via Box-Muller; deterministic given the rng.
pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // gen::<f64>() is in [0, 1); flip to (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
