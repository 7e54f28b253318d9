//! Seeded, splittable randomness.
//!
//! Every random draw in the crate flows through [`RngState`]: a ChaCha8
//! generator addressed by (seed, stream). Streams are independent by
//! construction, so data generation, noise textures, background noise, and
//! degradation draws can be replayed in isolation. Normal variates use the
//! Box-Muller transform (not a ziggurat) so sequences are reproducible
//! bit-for-bit from the uniform bit stream alone.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::Tensor;

/// Well-known stream purposes. A stream id packs (purpose, step, lane) so a
/// training step or clip index can derive its own generator without touching
/// any other stream's state.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const TEXTURE: u64 = 2;
    pub const BACKGROUND: u64 = 3;
    pub const ZETA: u64 = 4;
    pub const GAMMA: u64 = 5;
    pub const TIMESTEP: u64 = 6;
    pub const PARAMS: u64 = 7;
    pub const POSE: u64 = 8;
    pub const APPEARANCE: u64 = 9;

    /// Packs purpose (high byte), step (middle 48 bits), lane (low byte).
    pub fn compose(purpose: u64, step: u64, lane: u64) -> u64 {
        assert!(purpose < 256, "stream purpose {purpose} out of range");
        assert!(step < (1 << 48), "stream step {step} out of range");
        assert!(lane < 256, "stream lane {lane} out of range");
        (purpose << 56) | (step << 8) | lane
    }
}

/// Deterministic generator state for one named stream.
#[derive(Debug, Clone)]
pub struct RngState {
    rng: ChaCha8Rng,
    spare_normal: Option<f32>,
}

impl RngState {
    /// Root stream for a seed (stream id 0).
    pub fn seed(seed: u64) -> RngState {
        RngState::stream(seed, 0)
    }

    /// Independent stream `id` under `seed`.
    pub fn stream(seed: u64, id: u64) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        RngState { rng, spare_normal: None }
    }

    /// Shorthand for `stream(seed, compose(purpose, step, lane))`.
    pub fn purpose(seed: u64, purpose: u64, step: u64, lane: u64) -> RngState {
        RngState::stream(seed, streams::compose(purpose, step, lane))
    }

    pub fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f32 in [lo, hi).
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        assert!(lo <= hi, "uniform_f32 bounds reversed: [{lo}, {hi})");
        (lo as f64 + (hi as f64 - lo as f64) * self.uniform_f64()) as f32
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Rejection sampling over the top multiple of n keeps this unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive draws
    /// consume the uniform stream two at a time.
    pub fn normal_f32(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some((r * theta.sin()) as f32);
        (r * theta.cos()) as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal_f32();
        }
    }
}

/// Tensor of i.i.d. standard normal variates. A zero-size shape yields an
/// empty tensor without consuming any draws.
pub fn sample_standard_normal(shape: &[usize], rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}
