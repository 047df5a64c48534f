//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Max relative error between tape gradients and central differences of a
/// scalar function of one tensor.
///
/// Per coordinate the error is `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_difference_check`] over several inputs at once; the error is the max over all of them.
pub fn finite_difference_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let floor: T = c(1e-12);
    let two = T::one() + T::one();
    let mut worst = T::zero();
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (two * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn scalar_value<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<T> {
    let t = tape.value(v);
    if !t.shape().is_scalar() {
        return Err(Error::Graph(format!("checked function must return a scalar, got {}", t.shape())));
    }
    Ok(t.data()[0])
}
