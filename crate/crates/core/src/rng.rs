//! Seeding scheme.
//!
//! Every random quantity is drawn from a ChaCha8 stream whose seed is
//! `derive_seed(root_seed, stream_name)`: the FNV-1a hash of the stream name
//! is XORed into the root seed and the result is passed through one
//! SplitMix64 step. Stream names in use:
//!
//! | stream    | consumer                              |
//! |-----------|---------------------------------------|
//! | `"model"` | toy model weights                     |
//! | `"data"`  | sample set (cluster centers + noise)  |
//! | `"eval"`  | held-out evaluation set               |

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const STREAM_MODEL: &str = "model";
pub const STREAM_DATA: &str = "data";
pub const STREAM_EVAL: &str = "eval";

pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in stream.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ hash)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic source of uniform and Gaussian variates.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Sampler {
    pub fn new(seed: u64, stream: &str) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, stream)),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}
