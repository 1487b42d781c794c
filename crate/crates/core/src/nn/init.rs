use rand::Rng;

use crate::autodiff::Tensor;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default used by common
/// frameworks for both conv/linear weights and their biases.
pub(crate) fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
