//! Seeded pseudo-random numbers with bit-exact cross-platform behaviour.
//!
//! Everything random in this crate (noise tracks, dataset composition, weight
//! initialization, shuffling) flows from one of these generators, so a run is
//! reproducible from a single root seed. The core is the SplitMix64 mixer: the
//! state advances by a fixed odd constant and each output is a hash of the
//! state, which gives solid statistical quality with trivially portable
//! integer-only code.

/// Deterministic 64-bit generator (SplitMix64).
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent stream seed from a parent seed and a salt.
    ///
    /// Used to give every track / epoch / layer its own generator without any
    /// coordination between consumers.
    pub fn derive(seed: u64, salt: u64) -> u64 {
        mix64(seed ^ mix64(salt.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-1, 1)`; the white-noise sample distribution.
    pub fn uniform_signed(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. The modulo bias is below 2^-50 for the
    /// small `n` used here (band counts, shuffle indices).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct values drawn from `0..n`, returned sorted.
    pub fn distinct_below(&mut self, k: usize, n: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        let mut picked: Vec<usize> = pool.into_iter().take(k).collect();
        picked.sort_unstable();
        picked
    }
}
