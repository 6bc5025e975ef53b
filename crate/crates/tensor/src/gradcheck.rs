//! Central-difference gradient checking, always in f64.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of a single tensor input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {} outside [1e-6, 1e-3]", eps),
        });
    }
    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        let out = f(&mut tape, v)?;
        if !tape.value(out).is_scalar() {
            return Err(TensorError::NonScalarLoss(tape.value(out).shape().to_vec()));
        }
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite("grad_check forward".into()));
        }
        Ok(y)
    };

    // analytic gradient
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    if !tape.value(out).item().is_finite() {
        return Err(TensorError::NonFinite("grad_check forward".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(TensorError::NonFinite("grad_check derivative".into()));
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
