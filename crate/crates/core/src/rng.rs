//! Deterministic random number generation.
//!
//! All randomness in a run flows from a single master seed. Consumers never
//! share a stream: each one derives its own generator from (seed, label) or
//! (seed, label, index), so adding a new consumer cannot perturb the draws
//! seen by existing ones, and resuming at step t reproduces the exact stream
//! that an uninterrupted run would have used.

/// SplitMix64 generator. Small state, full 64-bit period, reproducible
/// everywhere — exactly what checkpoint-exact training needs.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to fold stream names into seeds.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed for a named stream.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a(label))
}

/// Derive a child seed for a named, indexed stream (e.g. per step or epoch).
pub fn sub_seed_indexed(seed: u64, label: &str, index: u64) -> u64 {
    mix(sub_seed(seed, label) ^ index.wrapping_mul(GOLDEN))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: mix(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of randomness.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Uses the widening-multiply trick; the bias
    /// for n << 2^64 is negligible and the stream stays deterministic.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
