//! Deterministic random-number streams.
//!
//! Every stochastic routine in this crate derives its randomness from a
//! ChaCha stream keyed by `(seed, stream, substream)`. Simulation replicates
//! use `(seed, replicate, channel)` and the biased-randomization reference
//! uses `(seed, stratum, draw)`, so results are reproducible regardless of
//! how work is scheduled across threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator for the stream identified by `(seed, stream, substream)`.
pub fn stream_rng(seed: u64, stream: u64, substream: u64) -> ChaCha12Rng {
    let mut state = seed;
    let w0 = splitmix64(&mut state);
    state ^= stream.wrapping_mul(0xA24B_AED4_963E_E407);
    let w1 = splitmix64(&mut state);
    state ^= substream.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    let w2 = splitmix64(&mut state);
    let w3 = splitmix64(&mut state);

    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&w0.to_le_bytes());
    key[8..16].copy_from_slice(&w1.to_le_bytes());
    key[16..24].copy_from_slice(&w2.to_le_bytes());
    key[24..32].copy_from_slice(&w3.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Samples an index from unnormalized nonnegative weights.
pub fn weighted_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite());
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}
