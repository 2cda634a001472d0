//! Counter-based random number generation.
//!
//! [`CounterRng`] is SplitMix64 written in counter form: the `i`-th output
//! (1-based) is `mix(seed + i * 0x9E3779B97F4A7C15)` with wrapping arithmetic,
//! where `mix` is the SplitMix64 finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! The whole state is the pair `(seed, counter)`, so it serializes trivially and
//! any language with 64-bit wrapping integers reproduces the same stream.
//! Bounded integers use the multiply-high map `floor(u * n / 2^64)`.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn from_state(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// `(seed, counter)`.
    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.counter)
    }

    pub fn next_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform integer in `0..n` via multiply-high. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_raw() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform float in `[0, 1)` with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fisher-Yates shuffle, swapping position `i` (from the end down to 1)
    /// with `below(i + 1)`.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream; used to give each batch sample its own stream.
    pub fn fork(&mut self) -> CounterRng {
        CounterRng::new(self.next_raw())
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
