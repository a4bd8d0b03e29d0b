//! Latent quantization: hard rounding for coding, additive uniform noise
//! as its differentiable training surrogate.

use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rounds every element to the nearest integer, ties to even.
pub fn quantize_round<S: Scalar>(y: &Tensor<S>) -> Tensor<S> {
    let mut out = y.clone();
    for v in out.data_mut().iter_mut() {
        *v = v.round_ties_even();
    }
    out
}

/// Adds iid uniform noise from [-1/2, 1/2) to every element.
pub fn quantize_noisy<S: Scalar>(y: &Tensor<S>, rng: &mut SeedRng) -> Tensor<S> {
    let mut out = y.clone();
    for v in out.data_mut().iter_mut() {
        *v += S::from_f64(rng.uniform() - 0.5);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_spec_cases() {
        let y = Tensor::from_vec(&[1, 1, 1, 5], vec![0.4f32, -1.6, 2.5, 3.5, -0.5]);
        let q = quantize_round(&y);
        assert_eq!(q.data(), &[0.0, -2.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn both_modes_stay_within_half_of_input() {
        let mut rng = SeedRng::new(4);
        let mut y = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        for v in y.data_mut().iter_mut() {
            *v = (rng.normal() * 10.0) as f32;
        }
        let q = quantize_round(&y);
        for (a, b) in q.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 0.5, "round moved {b} to {a}");
            assert_eq!(a.fract(), 0.0);
        }
        let n = quantize_noisy(&y, &mut rng);
        for (a, b) in n.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 0.5, "noise moved {b} to {a}");
        }
    }
}
