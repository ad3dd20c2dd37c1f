//! Central finite differences compared against the tape's reverse sweep.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by every gradient check:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of a tensor-to-scalar function at `x`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar node. Returns the maximum relative error over all entries.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input version of [`finite_diff_check`]: every tensor in `xs` is a
/// leaf and every entry of every leaf is perturbed.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let per_input = finite_diff_errors(&f, xs, h)?;
    Ok(per_input.into_iter().fold(0.0, f64::max))
}

/// Maximum relative error separately for each input tensor.
pub fn finite_diff_errors<F>(f: &F, xs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    eval(xs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut inputs = xs.to_vec();
    let mut errors = Vec::with_capacity(xs.len());
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst: f64 = 0.0;
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}
