//! Parameter initializers. All draws happen in f64 and are cast to the
//! element type, so a given seed produces the same values in both precisions.

use rand::Rng;

use super::tensor::{Element, Tensor};

/// Uniform in `[-bound, bound]`.
pub fn uniform<E: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<E> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Glorot/Xavier uniform for a `[fan_in × fan_out]` weight matrix.
pub fn xavier<E: Element>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut impl Rng,
) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_draws_across_precisions() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = uniform(&[4, 4], 0.5, &mut r1);
        let b: Tensor<f64> = uniform(&[4, 4], 0.5, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = xavier(8, 8, &[8, 8], &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
