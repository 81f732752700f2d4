//! SplitMix64 generator shared by the waveform renderer and the sensor noise model.
//!
//! The state is a bare `u64` so it can be stored inside plain-data state structs and
//! reproduced bit-for-bit by any other implementation of the same recurrence.

use std::f64::consts::TAU;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Advances `state` and returns the next raw 64-bit output.
#[inline]
pub fn next_u64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform double in `[0, 1)` built from the top 53 bits of the next output.
#[inline]
pub fn rng_next(state: &mut u64) -> f64 {
    (next_u64(state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate via Box–Muller over two consecutive uniforms.
///
/// The first uniform is mapped to `(0, 1]` so the logarithm is always finite.
/// Only the cosine branch is used; every call consumes exactly two outputs.
#[inline]
pub fn gaussian(state: &mut u64) -> f64 {
    let u1 = 1.0 - rng_next(state);
    let u2 = rng_next(state);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Seed of the sensor-noise stream derived from a test seed.
///
/// Waveform draws use the test seed directly; the noise stream is offset so the
/// two never share outputs.
pub fn noise_seed(test_seed: u64) -> u64 {
    test_seed ^ 0x6A09_E667_F3BC_C909
}
