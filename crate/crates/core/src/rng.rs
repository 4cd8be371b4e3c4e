//! SplitMix64 generator with a Box–Muller Gaussian transform.
//!
//! The stream is defined entirely by integer arithmetic, so a given seed
//! yields the same sequence on every platform.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform sample in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        // modulo bias is at most n / 2^64, irrelevant for the sizes used here
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal sample. Box–Muller produces pairs; the second value
    /// of each pair is kept for the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derive an independent generator for a sub-stream, e.g. one per batch element.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut mixer = SeededRng::new(self.state ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        SeededRng::new(mixer.next_u64())
    }
}

/// Fill a tensor of the given shape with i.i.d. normal samples.
///
/// Samples are drawn in f64 and rounded to f32.
pub fn gaussian_fill(rng: &mut SeededRng, shape: &[usize], mean: f32, std: f32) -> Tensor {
    assert!(std >= 0.0, "gaussian_fill: negative std {std}");
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| (mean as f64 + std as f64 * rng.next_gaussian()) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape by construction")
}
