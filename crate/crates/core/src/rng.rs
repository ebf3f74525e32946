//! Seedable standard-normal sampling for reproducible studies.
//!
//! Uniform variates come from the counter-based ChaCha20 stream cipher, and
//! the normal transform is the classic Box-Muller pair, so a recorded seed
//! fully determines every draw regardless of platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Deterministic standard-normal sampler.
#[derive(Debug, Clone)]
pub struct NormalSampler {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// One standard-normal draw via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1], so the logarithm is finite.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * sin);
        r * cos
    }

    /// A vector of `n` independent standard normals.
    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }
}
