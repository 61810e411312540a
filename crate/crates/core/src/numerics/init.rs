use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::value::Value;

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `[rows, cols]` matrix uniform in `±√(6 / (fan_in + fan_out))`.
    pub fn uniform_fan(&mut self, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Value {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        Value::matrix(rows, cols, data).expect("shape matches")
    }

    /// Dense weight matrix mapping `cols` inputs to `rows` outputs.
    pub fn dense(&mut self, rows: usize, cols: usize) -> Value {
        self.uniform_fan(rows, cols, cols, rows)
    }

    /// Zero-mean normal table, as used for node embeddings.
    pub fn normal(&mut self, rows: usize, cols: usize, sigma: f64) -> Value {
        let dist = Normal::new(0.0, sigma).expect("sigma is positive");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Value::matrix(rows, cols, data).expect("shape matches")
    }
}
