//! Seeded random streams.
//!
//! All randomness in the pipeline flows through `SeedStream`, a ChaCha12
//! generator with uniform/Gaussian draws implemented here so that outputs
//! are bit-stable across platforms and crate upgrades. Independent streams
//! are derived with a splitmix-style mixer, which is what makes per-sample
//! work order-independent.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

/// Splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

pub struct SeedStream {
    rng: ChaCha12Rng,
    spare_gaussian: Option<f64>,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
            spare_gaussian: None,
        }
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard Box-Muller, caching the second draw.
    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return mean + std * z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * theta.sin());
        mean + std * r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Per-pixel Gaussian image, optionally clipped to [0, 1].
pub fn gaussian_image(
    stream: &mut SeedStream,
    channels: usize,
    size: usize,
    mean: f64,
    std: f64,
    clip_unit: bool,
) -> Tensor {
    let mut data = Vec::with_capacity(channels * size * size);
    for _ in 0..channels * size * size {
        let mut v = stream.gaussian(mean, std);
        if clip_unit {
            v = v.clamp(0.0, 1.0);
        }
        data.push(v);
    }
    Tensor::new(vec![channels, size, size], data).expect("image shape")
}
