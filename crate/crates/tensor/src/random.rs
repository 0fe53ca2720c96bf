use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Seeded random stream. Identical seeds give identical draw sequences.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream, e.g. one per worker or per trial.
    pub fn fork(&mut self, salt: u64) -> RandomSource {
        let base: u64 = self.rng.random();
        RandomSource::new(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        Open01.sample(&mut self.rng)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// One Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open01().ln()).ln()
    }
}

/// Gumbel(0, 1) noise tensor; all zeros when `enabled` is false.
pub fn gumbel_noise(source: &mut RandomSource, shape: &[usize], enabled: bool) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if enabled {
        for v in t.data_mut() {
            *v = source.gumbel();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = gumbel_noise(&mut RandomSource::new(42), &[64], true);
        let b = gumbel_noise(&mut RandomSource::new(42), &[64], true);
        assert_eq!(a, b);
        let c = gumbel_noise(&mut RandomSource::new(43), &[64], true);
        assert_ne!(a, c);
    }

    #[test]
    fn disabled_noise_is_zero() {
        let t = gumbel_noise(&mut RandomSource::new(1), &[3, 4], false);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut src = RandomSource::new(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| src.gumbel()).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn open01_excludes_endpoints() {
        let mut src = RandomSource::new(0);
        for _ in 0..100_000 {
            let u = src.open01();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
