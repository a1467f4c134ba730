//! Counter-based Gaussian streams.
//!
//! Every draw is addressed by `(seed, stream, block)`: the ChaCha key is
//! derived from `seed`, the stream id selects the ChaCha nonce, and the
//! block index fixes the word position. Draws are therefore independent of
//! evaluation order, which keeps parallel Monte Carlo runs reproducible.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use statrs::function::erf::erfc_inv;

/// Addressable source of standard normal variates.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Fills `out` with the standard normals at `(stream, block)`.
    ///
    /// Blocks are laid out with a stride of `out.len()` draws, so callers must
    /// use a fixed block length per stream.
    pub fn standard_normals(&self, stream: u64, block: u64, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        // Two 32-bit words per draw.
        rng.set_word_pos(block as u128 * out.len() as u128 * 2);
        for z in out.iter_mut() {
            *z = inverse_normal_cdf(open_unit(rng.next_u64()));
        }
    }

    /// Uniforms on (0, 1) at `(stream, block)`, laid out like [`Self::standard_normals`].
    pub fn uniforms(&self, stream: u64, block: u64, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(block as u128 * out.len() as u128 * 2);
        for u in out.iter_mut() {
            *u = open_unit(rng.next_u64());
        }
    }
}

/// Maps 53 random bits to the open interval (0, 1).
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}
