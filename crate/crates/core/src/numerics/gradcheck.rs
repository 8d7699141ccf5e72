//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// and returns the largest element-wise relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`grad_check`]: every tensor in `xs` is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check_report(f, xs, h)?;
    Ok(report.into_iter().fold(0.0, f64::max))
}

/// Per-input maximum relative error.
pub fn grad_check_report<F>(f: F, xs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        if !v[0].is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf_with(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 || !tape.value(out)[0].is_finite() {
        return Err(Error::Numeric(
            "function value is not a finite scalar".into(),
        ));
    }
    tape.backward(out)?;

    let mut perturbed: Vec<Tensor> = xs.iter().map(Tensor::detached).collect();
    let mut errors = Vec::with_capacity(xs.len());
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; xs[slot].len()]);
        let mut worst: f64 = 0.0;
        for j in 0..xs[slot].len() {
            let orig = xs[slot].data()[j];
            perturbed[slot].data_mut()[j] = orig + h;
            let up = eval(&perturbed)?;
            perturbed[slot].data_mut()[j] = orig - h;
            let down = eval(&perturbed)?;
            perturbed[slot].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}
