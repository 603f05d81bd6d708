//! Seed plumbing. Every random quantity flows from one `u64` seed through
//! named ChaCha streams, so stages can be replayed independently.
//! Spatial random fields need random access by lattice node, which a
//! sequential stream cannot give; those use a stateless hash instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    World = 1,
    Survey = 2,
    Eval = 3,
    Resurvey = 4,
    Injection = 5,
    Particles = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    stream_with(seed, which, 0)
}

/// Sub-stream further keyed by an index (epoch, repetition, ...).
pub fn stream_with(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(index.wrapping_add(0x5851_f42d))));
    rng.set_stream(which as u64);
    rng
}

/// SplitMix64 finalizer; a bijective avalanche mix of 64 bits.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a key tuple to 64 bits.
#[inline]
pub fn hash_keys(keys: &[u64]) -> u64 {
    keys.iter().fold(0x243f_6a88_85a3_08d3, |h, &k| mix(h ^ k))
}

/// Standard normal deviate determined entirely by `keys` (Box–Muller on
/// two hashed uniforms).
#[inline]
pub fn hashed_normal(keys: &[u64]) -> f64 {
    let h = hash_keys(keys);
    let h2 = mix(h);
    // 53-bit uniforms in (0, 1]
    let u1 = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
