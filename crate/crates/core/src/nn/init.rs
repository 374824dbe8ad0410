use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Samples `Normal(0, 2 / (fan_in + fan_out))`.
pub fn xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Seeded convenience wrapper.
pub fn xavier_init(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    xavier_normal(shape, fan_in, fan_out, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_of(t: &Tensor) -> f64 {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn unit_fans_give_unit_std() {
        let t = xavier_init(&[100_000], 1, 1, 3);
        assert!((std_of(&t) - 1.0).abs() < 0.02);
    }

    #[test]
    fn same_seed_same_tensor() {
        assert_eq!(xavier_init(&[7, 3], 4, 5, 42), xavier_init(&[7, 3], 4, 5, 42));
        assert_ne!(xavier_init(&[7, 3], 4, 5, 42), xavier_init(&[7, 3], 4, 5, 43));
    }

    #[test]
    fn empirical_std_within_five_percent() {
        let t = xavier_init(&[100_000], 50, 50, 9);
        let want = 0.02f64.sqrt();
        assert!((std_of(&t) - want).abs() / want < 0.05);
    }
}
