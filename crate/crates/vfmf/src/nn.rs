//! Small shared building blocks for the trainable models: weight
//! initialization, linear layers bound through a parameter set, and f32/f64
//! parameter conversion for finite-difference checks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vfmf_tensor::{ParamSet, Scalar, Tape, Tensor, TensorError, Var};

/// Truncation-free normal init with the given std.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Fan-in scaled init (std = 1/sqrt(fan_in)) for linear weights.
pub fn linear_init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Tensor<f32> {
    normal_init(rng, &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt())
}

/// Registers weight `{name}.w` [in, out] and bias `{name}.b` [out].
pub fn add_linear(
    params: &mut ParamSet<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<(), TensorError> {
    params.insert(&format!("{name}.w"), linear_init(rng, in_dim, out_dim))?;
    params.insert(&format!("{name}.b"), Tensor::zeros(&[out_dim]))
}

/// Zero-initialized linear (used for adaLN-Zero gates and output projections).
pub fn add_linear_zero(
    params: &mut ParamSet<f32>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<(), TensorError> {
    params.insert(&format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]))?;
    params.insert(&format!("{name}.b"), Tensor::zeros(&[out_dim]))
}

/// x @ w + b for a registered linear layer.
pub fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut vfmf_tensor::Binder<'_, S>,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let w = binder.bind(tape, &format!("{name}.w"))?;
    let b = binder.bind(tape, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Widens every parameter to f64 (for gradient checks against the f32 model).
pub fn params_to_f64(params: &ParamSet<f32>) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for p in params.iter() {
        out.insert(&p.name, p.value.to_f64()).expect("unique names preserved");
    }
    out
}
