//! Deterministic keyed RNG streams.
//!
//! Every stochastic site derives its own generator from a run seed plus a
//! list of lane words (slice index, timestep, repeat index, ...), so
//! parallel and serial execution of the same work produce identical
//! results and no generator is ever shared across work items.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// splitmix64 finalizer, the usual mixer for building seed material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent generator keyed by `seed` and `lanes`.
pub fn stream_rng(seed: u64, lanes: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6d73_7265_7061_696e; // domain constant
    let mut key = [0u8; 32];
    let mut acc = splitmix64(&mut state);
    for &lane in lanes {
        state ^= lane.wrapping_mul(0x2545f4914f6cdd1d);
        acc ^= splitmix64(&mut state);
    }
    key[0..8].copy_from_slice(&acc.to_le_bytes());
    key[8..16].copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    key[16..24].copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    key[24..32].copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Fill a fresh vector with standard-normal draws.
pub fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Overwrite `out` with standard-normal draws.
pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
