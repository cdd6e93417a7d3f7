//! Deterministic random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by a
//! 64-bit seed and a 64-bit stream id, so results do not depend on how work
//! is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for a replicate, grid cell or component identified by `tags`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| {
        mix(acc.rotate_left(23) ^ mix(t.wrapping_add(0x632b_e59b_d9b4_e019)))
    })
}

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with independent standard normal draws scaled by `std`.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
}

/// `n` standard normal draws.
pub fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, 1.0, &mut v);
    v
}
