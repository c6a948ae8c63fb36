//! Central finite-difference verification of tape gradients.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-8;

fn eval(f: &impl Fn(&Tape, Var) -> Result<Var>, point: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&tape, x)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(AutodiffError::domain("grad_check", format!("f = {v}")));
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `point`
/// with `(f(x + h) - f(x - h)) / 2h` per coordinate and returns the worst
/// relative error.
pub fn grad_check(f: impl Fn(&Tape, Var) -> Result<Var>, point: &Tensor, h: f64) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&tape, x)?;
    if !tape.value(y).item()?.is_finite() {
        return Err(AutodiffError::domain("grad_check", "non-finite value at the point"));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.rows(), point.cols());
    if !analytic.is_finite() {
        return Err(AutodiffError::domain("grad_check", "non-finite gradient"));
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
