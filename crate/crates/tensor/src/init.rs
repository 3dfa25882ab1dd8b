//! Seeded weight initialization. Every draw goes through a caller-provided
//! RNG so a model seed fixes all weights.

use rand::Rng;

use crate::tensor::Tensor;

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    assert!(lo < hi, "empty uniform range");
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
/// For convolutions fan_in is Cin * kh * kw, for linear layers the input
/// width.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f32).sqrt();
    uniform(rng, shape, -bound, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_weights() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let ta = kaiming_uniform(&mut a, &[16, 3, 3, 3], 27);
        let tb = kaiming_uniform(&mut b, &[16, 3, 3, 3], 27);
        assert!(ta.bitwise_eq(&tb));
    }

    #[test]
    fn draws_respect_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fan_in = 50;
        let bound = (6.0f32 / fan_in as f32).sqrt();
        let t = kaiming_uniform(&mut rng, &[40, 50], fan_in);
        assert!(t.as_slice().iter().all(|v| v.abs() <= bound));
        // A degenerate draw would collapse the spread.
        let spread = t.as_slice().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(spread > bound * 0.5);
    }
}
