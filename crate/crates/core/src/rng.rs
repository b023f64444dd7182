//! Small deterministic RNG (SplitMix64) with the two samplers the crate
//! needs. Hand-rolled so seeded artifacts stay byte-identical regardless
//! of external crate versions.

/// SplitMix64 generator. Fast, tiny state, good enough statistics for
/// synthetic data and subset sampling.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    normal_spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            normal_spare: None,
        }
    }

    /// Derive an independent child generator; used for per-example seeds.
    pub fn fork(&self, salt: u64) -> SeededRng {
        let mut base = SeededRng::new(self.state ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        base.next_u64();
        SeededRng::new(base.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, one spare cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.normal_spare.take() {
            return z;
        }
        let mut u1 = self.uniform();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.normal_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal scaled by `std`, rounded through f32 so values survive the
    /// 32-bit archive payload exactly.
    pub fn normal_f32(&mut self, std: f64) -> f64 {
        (self.normal() * std) as f32 as f64
    }

    /// Sample `k` distinct indices from [0, n) (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            order.swap(i, j);
        }
        order.truncate(k);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SeededRng::new(123);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sample_indices_distinct_and_in_range() {
        let mut rng = SeededRng::new(5);
        let s = rng.sample_indices(10, 6);
        assert_eq!(s.len(), 6);
        let set: std::collections::BTreeSet<_> = s.iter().collect();
        assert_eq!(set.len(), 6);
        assert!(s.iter().all(|&i| i < 10));
    }
}
