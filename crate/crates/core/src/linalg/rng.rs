//! Seeded Gaussian sampling.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`. Uniforms in `[0, 1)` take the top 53 bits of
//! `next_u64`; normals come from the Box-Muller transform, both outputs of
//! each pair used in order (cosine branch first). Every step is integer or
//! IEEE-754 arithmetic, so streams are identical on every platform.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::DenseMatrix;

/// Deterministic stream of uniform and standard-normal samples.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }

    pub fn normal_vec(&mut self, len: usize, sigma: f64) -> Vec<f64> {
        (0..len).map(|_| sigma * self.standard_normal()).collect()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> DenseMatrix {
        DenseMatrix::new(rows, cols, self.normal_vec(rows * cols, sigma)).expect("sized buffer")
    }
}

/// Derives an independent child seed; used for per-trial streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `rows × cols` matrix of i.i.d. `N(0, sigma²)` samples.
///
/// Panics if `sigma` is not a positive finite number.
pub fn gaussian(rows: usize, cols: usize, seed: u64, sigma: f64) -> DenseMatrix {
    assert!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive");
    SeededRng::new(seed).normal_matrix(rows, cols, sigma)
}
