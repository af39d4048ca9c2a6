//! Portable seeded random streams.
//!
//! Every consumer draws from a ChaCha8 stream selected by `(seed, stream)`.
//! Uniform variates take the top 53 bits of `next_u64`; normal variates use the
//! Box-Muller transform over two uniforms. Both are defined here rather than
//! through `rand` distributions so the bits never change with a dependency bump.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids used by the rest of the crate. Weight tensors use
/// `WEIGHTS_BASE + tensor_index`.
pub mod streams {
    pub const NOISE: u64 = 1;
    pub const PROMPT: u64 = 2;
    pub const ADAPTER: u64 = 3;
    pub const WEIGHTS_BASE: u64 = 1 << 16;
}

pub struct SeededStream {
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - unit() lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.unit() * n as f64) as usize % n.max(1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
