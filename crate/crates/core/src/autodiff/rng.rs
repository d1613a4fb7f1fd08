use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// SplitMix64 generator. The output stream depends only on the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `(0, 1]` with 53 bits of resolution.
    pub fn next_open_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_unit()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift keeps the stream platform independent.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Box-Muller draw; always consumes exactly two `u64` values.
    pub fn gaussian(&mut self, mean: f64, variance: f64) -> Result<f64, AutodiffError> {
        if !(variance >= 0.0) {
            return Err(AutodiffError::NegativeVariance(variance));
        }
        let u1 = self.next_open_unit();
        let u2 = self.next_open_unit();
        if variance == 0.0 {
            return Ok(mean);
        }
        Ok(mean + variance.sqrt() * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent generator keyed by `index`, derived without touching `self`.
    pub fn derive(seed: u64, index: u64) -> Rng {
        Rng::new(Rng::new(seed ^ index).next_u64())
    }
}
