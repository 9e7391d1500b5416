//! Central-difference gradient checking. Used as the test oracle for every
//! differentiable path in the crate.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::Backward(format!("function must be scalar, got {:?}", tape.shape(out))))
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`finite_difference_check`] over several inputs at once; the error is
/// the max over every coordinate of every input.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Backward(format!(
            "function must be scalar, got {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
